//! Noise-mismatch sweep: denoise a test set corrupted at several noise levels
//! with models trained at one level, and tabulate mean PSNR per level.

use std::fmt::Write as _;

use rayon::prelude::*;
use r3l_core::env::add_awgn;
use r3l_core::image::ImageBuffer;
use r3l_core::inference::{denoise, DenoiseRequest};
use r3l_core::metrics::{psnr, quantize};
use r3l_core::networks::ModelParams;
use r3l_core::rng::derive_seed;

use crate::error::{Error, Result};
use crate::train::fmt_db;

pub const CSV_HEADER: &str = "test_sigma,mean_psnr_db,n_images";
pub const NOISY_COLUMN: &str = "Noisy";

/// Test levels for a model trained at `trained_sigma`: the five levels
/// centred on it in steps of 5.
pub fn default_sigmas(trained_sigma: f64) -> Vec<f64> {
    if trained_sigma == 35.0 {
        return vec![25.0, 30.0, 35.0, 40.0, 45.0];
    }
    if trained_sigma == 25.0 {
        return vec![15.0, 20.0, 25.0, 30.0, 35.0];
    }
    (-2..=2).map(|k| trained_sigma + 5.0 * k as f64).filter(|s| *s >= 0.0).collect()
}

/// Seed of the noise added to test image `index` at level `sigma`; shared by
/// every method so all of them see identical corruptions.
pub fn noise_seed(seed: u64, index: usize, sigma: f64) -> u64 {
    derive_seed(&[seed, index as u64, sigma.to_bits()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Method<'a> {
    pub name: String,
    pub params: &'a ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    /// Mean PSNR per test level, same order as [`SweepReport::sigmas`].
    pub psnr: Vec<f64>,
}

impl Column {
    pub fn average(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub trained_sigma: f64,
    pub sigmas: Vec<f64>,
    pub n_images: usize,
    pub stages: usize,
    /// The noisy input first, then one column per method.
    pub columns: Vec<Column>,
}

pub struct SweepRequest<'a> {
    pub methods: Vec<Method<'a>>,
    pub test_set: &'a [ImageBuffer],
    pub sigmas: Vec<f64>,
    pub trained_sigma: f64,
    pub stages: usize,
    pub seed: u64,
}

pub fn sweep(req: &SweepRequest<'_>) -> Result<SweepReport> {
    if req.test_set.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    if req.sigmas.is_empty() {
        return Err(Error::Config("sigmas: at least one test level is required".into()));
    }
    if let Some(s) = req.sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("sigmas: {s} is not a valid noise level")));
    }
    let n = req.test_set.len();
    let mut columns: Vec<Column> = std::iter::once(NOISY_COLUMN.to_owned())
        .chain(req.methods.iter().map(|m| m.name.clone()))
        .map(|name| Column { name, psnr: Vec::new() })
        .collect();
    for &sigma in &req.sigmas {
        // per image: noisy PSNR, then one PSNR per method
        let per_image = req
            .test_set
            .par_iter()
            .enumerate()
            .map(|(i, img)| -> Result<Vec<f64>> {
                let clean = img.to_tensor();
                let noisy = add_awgn(&clean, sigma, noise_seed(req.seed, i, sigma))?;
                let mut scores = vec![psnr(&clean, &noisy)?];
                for m in &req.methods {
                    let out = denoise(&DenoiseRequest::new(&noisy, m.params).stages(req.stages))?;
                    scores.push(psnr(&clean, &quantize(&out.image))?);
                }
                Ok(scores)
            })
            .collect::<Result<Vec<_>>>()?;
        for (c, col) in columns.iter_mut().enumerate() {
            col.psnr.push(per_image.iter().map(|s| s[c]).sum::<f64>() / n as f64);
        }
    }
    Ok(SweepReport {
        trained_sigma: req.trained_sigma,
        sigmas: req.sigmas.clone(),
        n_images: n,
        stages: req.stages,
        columns,
    })
}

fn fmt_sigma(s: f64) -> String {
    if s.fract() == 0.0 {
        format!("{s:.0}")
    } else {
        format!("{s}")
    }
}

impl SweepReport {
    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// One column in the `test_sigma,mean_psnr_db,n_images` layout.
    pub fn csv(&self, column: &str) -> Option<String> {
        let col = self.column(column)?;
        let mut out = format!("{CSV_HEADER}\n");
        for (s, p) in self.sigmas.iter().zip(&col.psnr) {
            let _ = writeln!(out, "{},{},{}", fmt_sigma(*s), fmt_db(*p), self.n_images);
        }
        Some(out)
    }

    /// Aligned markdown table, one row per test level plus the average row.
    pub fn markdown(&self) -> String {
        let mut header = vec!["σ".to_owned()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        let mut rows: Vec<Vec<String>> = self
            .sigmas
            .iter()
            .enumerate()
            .map(|(r, s)| {
                std::iter::once(fmt_sigma(*s))
                    .chain(self.columns.iter().map(|c| format!("{:.2}", c.psnr[r])))
                    .collect()
            })
            .collect();
        rows.push(
            std::iter::once("Average".to_owned())
                .chain(self.columns.iter().map(|c| format!("{:.2}", c.average())))
                .collect(),
        );
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                rows.iter()
                    .map(|r| r[i].chars().count())
                    .chain([header[i].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let body: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    let pad = w - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            format!("| {} |\n", body.join(" | "))
        };
        let rule: Vec<String> = widths
            .iter()
            .enumerate()
            .map(|(i, w)| if i == 0 { "-".repeat(w + 2) } else { format!("{}:", "-".repeat(w + 1)) })
            .collect();
        let mut out = format!(
            "Mean PSNR (dB) over {} test images, models trained at σ={}, T={}.\n\
             Model outputs are clipped to [0, 255] and rounded before scoring; \
             the {NOISY_COLUMN} column scores the unclipped noisy input.\n\n",
            self.n_images,
            fmt_sigma(self.trained_sigma),
            self.stages
        );
        out.push_str(&line(&header));
        out.push_str(&format!("|{}|\n", rule.join("|")));
        for r in &rows {
            out.push_str(&line(r));
        }
        out
    }
}
