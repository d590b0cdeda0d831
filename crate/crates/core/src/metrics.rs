//! Image-quality and consistency metrics.
//!
//! * PSNR in dB against a peak value; identical inputs give `+∞`, which
//!   aggregates cap at [`PSNR_CAP`].
//! * SSIM, single scale: 7×7 uniform window over valid positions,
//!   `K₁ = 0.01`, `K₂ = 0.03`, dynamic range 1, population (biased)
//!   window statistics; computed per channel and averaged.
//! * Consistency: `10⁵ · mean((y − D(x_SR))²)`.
//!
//! Colour images are compared on all channels (RGB), not on luma.

use std::fmt::Write as _;

use crate::degradations::{DegradationDescriptor, DegradationOp};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Consistency values are MSEs in units of 10⁻⁵.
pub const CONSISTENCY_SCALE: f64 = 1e5;

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: op.into(),
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let n = a.len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// `10·log₁₀(peak² / MSE)`; `+∞` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Contract(format!(
            "peak must be positive, got {peak}"
        )));
    }
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / m).log10()
    })
}

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[h, w] => Ok((1, h, w)),
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::Contract(format!(
            "ssim expects [H, W] or [C, H, W], got {s:?}"
        ))),
    }
}

/// Mean SSIM over channels and valid window positions.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (c, h, w) = planes(a)?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Contract(format!(
            "images of {h}x{w} are smaller than the {k}x{k} SSIM window"
        )));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let nwin = (k * k) as f64;
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    for ch in 0..c {
        let off = ch * h * w;
        let mut sum = 0.0;
        for i in 0..=h - k {
            for j in 0..=w - k {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..k {
                    for dj in 0..k {
                        let p = off + (i + di) * w + j + dj;
                        let (x, y) = (ad[p] as f64, bd[p] as f64);
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let (ma, mb) = (sa / nwin, sb / nwin);
                let va = (saa / nwin - ma * ma).max(0.0);
                let vb = (sbb / nwin - mb * mb).max(0.0);
                let cov = sab / nwin - ma * mb;
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += sum / ((h - k + 1) * (w - k + 1)) as f64;
    }
    Ok(total / c as f64)
}

/// `10⁵ · mean((y − D(x_SR))²)`.
pub fn consistency(y: &Tensor, x_sr: &Tensor, d: &DegradationOp) -> Result<f64> {
    let re = d.apply(x_sr)?;
    if re.shape() != y.shape() {
        return Err(Error::shape(
            "consistency measurements",
            re.shape(),
            y.shape(),
        ));
    }
    Ok(CONSISTENCY_SCALE * mse(y, &re)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub consistency: f64,
}

/// Per-image and mean metrics for a set of SR outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub degradation: DegradationDescriptor,
}

/// One SR output `x_sr` against its reference `x_ref` and measurement `y`
/// (all single items, values in `[0, 1]`).
pub fn evaluate_pair(
    name: &str,
    x_sr: &Tensor,
    x_ref: &Tensor,
    y: &Tensor,
    d: &DegradationOp,
) -> Result<EvalRow> {
    Ok(EvalRow {
        name: name.to_string(),
        psnr: psnr(x_sr, x_ref, 1.0)?,
        ssim: ssim(x_sr, x_ref)?,
        consistency: consistency(y, x_sr, d)?,
    })
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>, d: &DegradationOp) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("evaluation set is empty".into()));
        }
        Ok(EvalReport {
            rows,
            degradation: d.descriptor(),
        })
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    fn mean_of(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    /// Mean PSNR with each image capped at [`PSNR_CAP`].
    pub fn mean_psnr(&self) -> f64 {
        self.mean_of(|r| r.psnr.min(PSNR_CAP))
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean_of(|r| r.ssim)
    }

    pub fn mean_consistency(&self) -> f64 {
        self.mean_of(|r| r.consistency)
    }

    /// Standard error of the mean consistency.
    pub fn consistency_stderr(&self) -> f64 {
        let n = self.rows.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let m = self.mean_consistency();
        let var = self
            .rows
            .iter()
            .map(|r| (r.consistency - m).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    }

    /// `name,psnr,ssim,consistency` per image, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr,ssim,consistency\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.name, r.psnr, r.ssim, r.consistency);
        }
        let _ = writeln!(
            s,
            "mean,{},{},{}",
            self.mean_psnr(),
            self.mean_ssim(),
            self.mean_consistency()
        );
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images       {}", self.count());
        let _ = writeln!(
            s,
            "psnr (dB)    {:.3}  (per-image cap {PSNR_CAP})",
            self.mean_psnr()
        );
        let _ = writeln!(
            s,
            "ssim         {:.4}  (window {SSIM_WINDOW}x{SSIM_WINDOW} uniform, K1 {SSIM_K1}, K2 {SSIM_K2})",
            self.mean_ssim()
        );
        let _ = writeln!(
            s,
            "consistency  {:.4} ± {:.4}  (MSE x 1e-5)",
            self.mean_consistency(),
            self.consistency_stderr()
        );
        let _ = writeln!(s, "degradation:");
        for line in self.degradation.to_text().lines() {
            let _ = writeln!(s, "  {line}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: Vec<f32>, shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn psnr_reference_values() {
        let a = img(vec![0.0; 4], &[4]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = img(vec![0.1; 4], &[4]);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        let c = img(vec![1.0; 4], &[4]);
        assert!(psnr(&a, &c, 1.0).unwrap().abs() < 1e-12);
        assert!(psnr(&a, &c, 0.0).is_err());
        assert!(psnr(&a, &img(vec![0.0; 3], &[3]), 1.0).is_err());
    }

    #[test]
    fn ssim_reference_values() {
        let zeros = img(vec![0.0; 64], &[8, 8]);
        let ones = img(vec![1.0; 64], &[8, 8]);
        assert!((ssim(&zeros, &zeros).unwrap() - 1.0).abs() < 1e-12);
        let c1 = SSIM_K1 * SSIM_K1;
        assert!((ssim(&zeros, &ones).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!(ssim(&img(vec![0.0; 36], &[6, 6]), &img(vec![0.0; 36], &[6, 6])).is_err());
    }

    #[test]
    fn consistency_of_constant_offset() {
        let d = DegradationOp::average_pool(&[1, 4, 4], 2).unwrap();
        let x = img((0..16).map(|i| i as f32 / 16.0).collect(), &[1, 4, 4]);
        let y = d.apply(&x).unwrap();
        assert_eq!(consistency(&y, &x, &d).unwrap(), 0.0);
        let shifted = x.map(|v| v + 0.001);
        let c = consistency(&y, &shifted, &d).unwrap();
        assert!((c - 0.1).abs() < 1e-3, "{c}");
    }

    #[test]
    fn report_aggregates() {
        let d = DegradationOp::average_pool(&[1, 8, 8], 2).unwrap();
        let x = img((0..64).map(|i| i as f32 / 64.0).collect(), &[1, 8, 8]);
        let y = d.apply(&x).unwrap();
        let r = evaluate_pair("a", &x, &x, &y, &d).unwrap();
        assert_eq!(r.psnr, f64::INFINITY);
        let report = EvalReport::new(vec![r.clone(), r], &d).unwrap();
        assert_eq!(report.mean_psnr(), PSNR_CAP);
        assert!((report.mean_ssim() - 1.0).abs() < 1e-12);
        assert!(report.to_csv().ends_with("mean,99,1,0\n"));
        assert!(report.summary().contains("average-pool"));
        assert!(EvalReport::new(vec![], &d).is_err());
    }
}
