//! Degradation operators `D: X -> Y`, their text descriptors, and exact
//! pseudoinverses for the linear cases.
//!
//! Spatial operators act on `[C, H, W]` items (optionally with a leading
//! batch axis) and are separable: every channel plane `P` maps to
//! `Ah · P · Awᵀ` with small per-axis weight matrices. That makes them cheap
//! to apply, easy to materialize for tests, and gives their pseudoinverse in
//! closed form as the Kronecker product of per-axis pseudoinverses.
//!
//! # Bicubic convention
//!
//! Output sample `o` of an axis resized from `n_in` to `n_out` is centred at
//! input coordinate `(o + 0.5) * n_in / n_out - 0.5`. Taps use the
//! Catmull-Rom cubic (`a = -0.5`); when shrinking, the kernel is stretched by
//! the ratio `n_in / n_out` (anti-aliasing). Out-of-range taps are folded
//! back by mirror reflection without repeating the edge sample
//! (`-1 -> 1`, `n -> n - 2`), and each row of weights is normalized to sum
//! to one.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, RngStream, Tensor};

/// Largest spatial side for which [`DegradationOp::matrix`] will
/// materialize a spatial operator.
pub const MAX_MATERIALIZED_SIDE: usize = 64;

/// Catmull-Rom parameter of the bicubic kernel.
pub const BICUBIC_A: f64 = -0.5;

/// Human-readable description of the fixed bicubic convention, recorded in
/// descriptors so reports are auditable.
pub const BICUBIC_CONVENTION: &str = "catmull-rom a=-0.5, antialiased, reflect border";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradationKind {
    LinearMatrix,
    AveragePool,
    BicubicDownsample,
    NearestSubsample,
}

impl DegradationKind {
    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::LinearMatrix => "linear-matrix",
            DegradationKind::AveragePool => "average-pool",
            DegradationKind::BicubicDownsample => "bicubic-downsample",
            DegradationKind::NearestSubsample => "nearest-subsample",
        }
    }

    pub fn is_spatial(self) -> bool {
        self != DegradationKind::LinearMatrix
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Serializable description of a degradation, embedded in experiment
/// configs, checkpoint headers and evaluation reports.
///
/// The text form is a block of `key = value` lines:
///
/// ```text
/// kind = "bicubic-downsample"
/// scale = 4
/// input_shape = [1, 32, 32]
/// output_shape = [1, 8, 8]
/// kernel = "catmull-rom a=-0.5, antialiased, reflect border"
/// ```
///
/// Linear-matrix operators carry either an inline `matrix = [[...], ...]`
/// (row-major, one inner list per output coordinate) or a `matrix_path`
/// naming a whitespace-separated text file with one row per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationDescriptor {
    pub kind: DegradationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
    pub input_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
}

impl DegradationDescriptor {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("descriptor serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("degradation descriptor: {e}")))
    }
}

/// Per-axis weights of a separable spatial operator, row-major
/// `[n_out, n_in]`, stored in `f64` so pseudoinverses are computed exactly.
#[derive(Clone, Debug, PartialEq)]
struct AxisWeights {
    n_out: usize,
    n_in: usize,
    w: Vec<f64>,
}

impl AxisWeights {
    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_out, self.n_in, &self.w)
    }

    fn as_f32(&self) -> Vec<f32> {
        self.w.iter().map(|&v| v as f32).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Form {
    /// `[m, n]` row-major.
    Dense(Tensor),
    Separable {
        rows: AxisWeights,
        cols: AxisWeights,
        rows32: Vec<f32>,
        cols32: Vec<f32>,
    },
}

/// A degradation operator with declared input and output shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationOp {
    kind: DegradationKind,
    scale: usize,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    matrix_path: Option<String>,
    form: Form,
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

fn cubic(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic resampling weights for one axis; see the module docs.
fn bicubic_weights(n_in: usize, n_out: usize) -> AxisWeights {
    let ratio = n_in as f64 / n_out as f64;
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    let mut w = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        let center = (o as f64 + 0.5) * ratio - 0.5;
        let lo = (center - support).floor() as isize;
        let hi = (center + support).ceil() as isize;
        let row = &mut w[o * n_in..(o + 1) * n_in];
        let mut total = 0.0;
        for i in lo..=hi {
            let k = cubic((i as f64 - center) / stretch);
            if k != 0.0 {
                row[reflect(i, n_in)] += k;
                total += k;
            }
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    AxisWeights { n_out, n_in, w }
}

fn pool_weights(n_in: usize, s: usize) -> AxisWeights {
    let n_out = n_in / s;
    let mut w = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        for i in 0..s {
            w[o * n_in + o * s + i] = 1.0 / s as f64;
        }
    }
    AxisWeights { n_out, n_in, w }
}

fn subsample_weights(n_in: usize, s: usize) -> AxisWeights {
    let n_out = n_in / s;
    let mut w = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        w[o * n_in + o * s] = 1.0;
    }
    AxisWeights { n_out, n_in, w }
}

/// Numerical rank from singular values, with the usual
/// `max(m, n) * eps * sigma_max` threshold.
fn rank(a: &DMatrix<f64>) -> usize {
    let sv = a.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let tol = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * smax;
    sv.iter().filter(|&&s| s > tol).count()
}

/// `Aᵀ(AAᵀ)⁻¹` for a full-row-rank `A`.
fn pinv_full_row_rank(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = a.shape();
    let gram = a * a.transpose();
    let chol = gram
        .cholesky()
        .ok_or(Error::RankDeficient { rows: m, cols: n })?;
    let inv = chol.inverse();
    Ok(a.transpose() * inv)
}

fn dmatrix_to_tensor(a: &DMatrix<f64>) -> Tensor {
    let (r, c) = a.shape();
    Tensor::from_fn(vec![r, c], |i| a[(i / c, i % c)] as f32)
}

fn tensor_to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    DMatrix::from_fn(r, c, |i, j| t.data()[i * c + j] as f64)
}

/// Applies `rows · P · colsᵀ` to every trailing `[h, w]` plane of `data`.
fn separable_apply(
    data: &[f32],
    planes: usize,
    (rows, h, oh): (&[f32], usize, usize),
    (cols, w, ow): (&[f32], usize, usize),
) -> Vec<f32> {
    let mut out = vec![0.0f32; planes * oh * ow];
    let mut tmp = vec![0.0f32; oh * w];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        f32::gemm(oh, h, w, 1.0, rows, false, src, false, 0.0, &mut tmp);
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        f32::gemm(oh, w, ow, 1.0, &tmp, false, cols, true, 0.0, dst);
    }
    out
}

impl DegradationOp {
    /// Linear map given by an `[m, n]` matrix of full row rank.
    pub fn linear(matrix: Tensor) -> Result<Self> {
        if matrix.ndim() != 2 {
            return Err(Error::Contract(format!(
                "degradation matrix must be 2-D, got shape {:?}",
                matrix.shape()
            )));
        }
        let (m, n) = (matrix.shape()[0], matrix.shape()[1]);
        if m == 0 || n == 0 || m > n || rank(&tensor_to_dmatrix(&matrix)) < m {
            return Err(Error::RankDeficient { rows: m, cols: n });
        }
        Ok(DegradationOp {
            kind: DegradationKind::LinearMatrix,
            scale: 1,
            input_shape: vec![n],
            output_shape: vec![m],
            matrix_path: None,
            form: Form::Dense(matrix),
        })
    }

    /// Convenience for small hand-written matrices.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Contract("ragged degradation matrix".into()));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::linear(Tensor::from_f64(vec![m, n], &flat)?)
    }

    /// Spatial operator on `[channels, height, width]` items.
    pub fn spatial(kind: DegradationKind, input_shape: &[usize], scale: usize) -> Result<Self> {
        if !kind.is_spatial() {
            return Err(Error::Contract(format!("{kind} is not a spatial kind")));
        }
        let &[c, h, w] = input_shape else {
            return Err(Error::Contract(format!(
                "spatial degradation needs a [C, H, W] input shape, got {input_shape:?}"
            )));
        };
        if scale == 0 || c == 0 || h == 0 || w == 0 || h % scale != 0 || w % scale != 0 {
            return Err(Error::Contract(format!(
                "scale {scale} does not divide input shape {input_shape:?}"
            )));
        }
        let (rows, cols) = match kind {
            DegradationKind::AveragePool => (pool_weights(h, scale), pool_weights(w, scale)),
            DegradationKind::BicubicDownsample => {
                (bicubic_weights(h, h / scale), bicubic_weights(w, w / scale))
            }
            DegradationKind::NearestSubsample => {
                (subsample_weights(h, scale), subsample_weights(w, scale))
            }
            DegradationKind::LinearMatrix => unreachable!(),
        };
        Ok(DegradationOp {
            kind,
            scale,
            input_shape: input_shape.to_vec(),
            output_shape: vec![c, h / scale, w / scale],
            matrix_path: None,
            form: Form::Separable {
                rows32: rows.as_f32(),
                cols32: cols.as_f32(),
                rows,
                cols,
            },
        })
    }

    pub fn average_pool(input_shape: &[usize], scale: usize) -> Result<Self> {
        Self::spatial(DegradationKind::AveragePool, input_shape, scale)
    }

    pub fn bicubic(input_shape: &[usize], scale: usize) -> Result<Self> {
        Self::spatial(DegradationKind::BicubicDownsample, input_shape, scale)
    }

    pub fn nearest(input_shape: &[usize], scale: usize) -> Result<Self> {
        Self::spatial(DegradationKind::NearestSubsample, input_shape, scale)
    }

    pub fn kind(&self) -> DegradationKind {
        self.kind
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    /// Number of items in `x` (1 if unbatched), after checking that its
    /// trailing axes are `item`.
    fn batch_of(x: &Tensor, item: &[usize], op: &str) -> Result<(usize, bool)> {
        let s = x.shape();
        if s == item {
            return Ok((1, false));
        }
        if s.len() == item.len() + 1 && &s[1..] == item {
            return Ok((s[0], true));
        }
        Err(Error::shape(op, item, s))
    }

    /// `y = D(x)`; accepts a single item or a batch with a leading axis.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, batched) = Self::batch_of(x, &self.input_shape, "degradation input")?;
        let data = match &self.form {
            Form::Dense(a) => {
                let (m, k) = (self.output_len(), self.input_len());
                let mut out = vec![0.0f32; n * m];
                f32::gemm(n, k, m, 1.0, x.data(), false, a.data(), true, 0.0, &mut out);
                out
            }
            Form::Separable {
                rows,
                cols,
                rows32,
                cols32,
            } => separable_apply(
                x.data(),
                n * self.input_shape[0],
                (rows32, rows.n_in, rows.n_out),
                (cols32, cols.n_in, cols.n_out),
            ),
        };
        let mut shape = self.output_shape.clone();
        if batched {
            shape.insert(0, n);
        }
        Tensor::new(shape, data)
    }

    /// Explicit `[m, n]` matrix. Spatial kinds are materialized only for
    /// inputs no larger than [`MAX_MATERIALIZED_SIDE`] on each side.
    pub fn matrix(&self) -> Result<Tensor> {
        match &self.form {
            Form::Dense(a) => Ok(a.clone()),
            Form::Separable { rows, cols, .. } => {
                if rows.n_in > MAX_MATERIALIZED_SIDE || cols.n_in > MAX_MATERIALIZED_SIDE {
                    return Err(Error::Contract(format!(
                        "refusing to materialize a {:?} operator (limit {MAX_MATERIALIZED_SIDE} per side)",
                        self.input_shape
                    )));
                }
                Ok(dmatrix_to_tensor(&self.matrix_f64()))
            }
        }
    }

    fn matrix_f64(&self) -> DMatrix<f64> {
        match &self.form {
            Form::Dense(a) => tensor_to_dmatrix(a),
            Form::Separable { rows, cols, .. } => {
                let c = self.input_shape[0];
                let k = rows.to_matrix().kronecker(&cols.to_matrix());
                DMatrix::<f64>::identity(c, c).kronecker(&k)
            }
        }
    }

    /// The Moore-Penrose pseudoinverse `Aᵀ(AAᵀ)⁻¹` as an explicit `[n, m]`
    /// matrix, computed in double precision.
    pub fn moore_penrose(&self) -> Result<Tensor> {
        if let Form::Separable { rows, cols, .. } = &self.form {
            if rows.n_in > MAX_MATERIALIZED_SIDE || cols.n_in > MAX_MATERIALIZED_SIDE {
                return Err(Error::Contract(format!(
                    "refusing to materialize the pseudoinverse of a {:?} operator",
                    self.input_shape
                )));
            }
        }
        Ok(dmatrix_to_tensor(&pinv_full_row_rank(&self.matrix_f64())?))
    }

    /// Matrix-free pseudoinverse usable at any size.
    pub fn pseudoinverse(&self) -> Result<Pseudoinverse> {
        let form = match &self.form {
            Form::Dense(a) => PinvForm::Dense(dmatrix_to_tensor(&pinv_full_row_rank(
                &tensor_to_dmatrix(a),
            )?)),
            Form::Separable { rows, cols, .. } => PinvForm::Separable {
                rows: dmatrix_to_tensor(&pinv_full_row_rank(&rows.to_matrix())?).into_data(),
                cols: dmatrix_to_tensor(&pinv_full_row_rank(&cols.to_matrix())?).into_data(),
            },
        };
        Ok(Pseudoinverse {
            input_shape: self.output_shape.clone(),
            output_shape: self.input_shape.clone(),
            form,
        })
    }

    pub fn descriptor(&self) -> DegradationDescriptor {
        let (matrix, matrix_path) = match (&self.form, &self.matrix_path) {
            (_, Some(p)) => (None, Some(p.clone())),
            (Form::Dense(a), None) => {
                let n = a.shape()[1];
                let rows = a
                    .data()
                    .chunks(n)
                    .map(|r| r.iter().map(|&v| v as f64).collect())
                    .collect();
                (Some(rows), None)
            }
            _ => (None, None),
        };
        DegradationDescriptor {
            kind: self.kind,
            scale: self.kind.is_spatial().then_some(self.scale),
            input_shape: self.input_shape.clone(),
            output_shape: Some(self.output_shape.clone()),
            matrix,
            matrix_path,
            kernel: (self.kind == DegradationKind::BicubicDownsample)
                .then(|| BICUBIC_CONVENTION.to_string()),
        }
    }

    /// Builds an operator from its descriptor. A relative `matrix_path` is
    /// resolved against `base_dir`.
    pub fn from_descriptor(d: &DegradationDescriptor, base_dir: Option<&Path>) -> Result<Self> {
        let op = match d.kind {
            DegradationKind::LinearMatrix => {
                if d.scale.is_some_and(|s| s != 1) {
                    return Err(Error::Config(
                        "linear-matrix degradations take no scale".into(),
                    ));
                }
                let (rows, path) =
                    match (&d.matrix, &d.matrix_path) {
                        (Some(m), None) => (m.clone(), None),
                        (None, Some(p)) => {
                            let full = match base_dir {
                                Some(b) if Path::new(p).is_relative() => b.join(p),
                                _ => Path::new(p).to_path_buf(),
                            };
                            (read_matrix_file(&full)?, Some(p.clone()))
                        }
                        _ => return Err(Error::Config(
                            "linear-matrix degradation needs exactly one of matrix, matrix_path"
                                .into(),
                        )),
                    };
                let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
                let mut op = Self::from_rows(&refs)?;
                if op.input_shape != d.input_shape {
                    return Err(Error::Config(format!(
                        "matrix has {} columns but input_shape is {:?}",
                        op.input_len(),
                        d.input_shape
                    )));
                }
                op.matrix_path = path;
                op
            }
            kind => {
                if d.matrix.is_some() || d.matrix_path.is_some() {
                    return Err(Error::Config(format!("{kind} degradations take no matrix")));
                }
                if let Some(k) = &d.kernel {
                    if kind != DegradationKind::BicubicDownsample || k != BICUBIC_CONVENTION {
                        return Err(Error::Config(format!(
                            "unsupported kernel {k:?} for {kind} (supported: {BICUBIC_CONVENTION:?})"
                        )));
                    }
                }
                let scale = d
                    .scale
                    .ok_or_else(|| Error::Config(format!("{kind} degradation needs a scale")))?;
                Self::spatial(kind, &d.input_shape, scale)
                    .map_err(|e| Error::Config(e.to_string()))?
            }
        };
        if let Some(out) = &d.output_shape {
            if out != &op.output_shape {
                return Err(Error::Config(format!(
                    "descriptor output_shape {out:?} disagrees with computed {:?}",
                    op.output_shape
                )));
            }
        }
        Ok(op)
    }
}

fn read_matrix_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read matrix file {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|v| {
                    v.parse::<f64>().map_err(|_| {
                        Error::Config(format!("bad number {v:?} in {}", path.display()))
                    })
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
enum PinvForm {
    /// `[n, m]` row-major.
    Dense(Tensor),
    /// Per-axis pseudoinverses, `[h, oh]` and `[w, ow]`.
    Separable { rows: Vec<f32>, cols: Vec<f32> },
}

/// A pseudoinverse `D⁺: Y -> X` that can be applied without materializing
/// the full matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pseudoinverse {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    form: PinvForm,
}

impl Pseudoinverse {
    pub fn apply(&self, y: &Tensor) -> Result<Tensor> {
        let (n, batched) = DegradationOp::batch_of(y, &self.input_shape, "pseudoinverse input")?;
        let data = match &self.form {
            PinvForm::Dense(p) => {
                let (rows, cols) = (p.shape()[0], p.shape()[1]);
                let mut out = vec![0.0f32; n * rows];
                f32::gemm(
                    n,
                    cols,
                    rows,
                    1.0,
                    y.data(),
                    false,
                    p.data(),
                    true,
                    0.0,
                    &mut out,
                );
                out
            }
            PinvForm::Separable { rows, cols } => {
                let (c, oh, ow) = (
                    self.input_shape[0],
                    self.input_shape[1],
                    self.input_shape[2],
                );
                let (h, w) = (self.output_shape[1], self.output_shape[2]);
                separable_apply(y.data(), n * c, (rows, oh, h), (cols, ow, w))
            }
        };
        let mut shape = self.output_shape.clone();
        if batched {
            shape.insert(0, n);
        }
        Tensor::new(shape, data)
    }
}

fn check_spatial(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::Contract(format!(
            "{what} needs at least two spatial axes, got shape {:?}",
            x.shape()
        )));
    }
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((x.len() / (h * w).max(1), h, w))
}

/// Replicates each pixel of the two trailing axes into an `s x s` block.
pub fn nearest_upsample(y: &Tensor, s: usize) -> Result<Tensor> {
    if s == 0 {
        return Err(Error::Contract("upsampling factor must be positive".into()));
    }
    let (planes, h, w) = check_spatial(y, "nearest_upsample")?;
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &y.data()[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                out[p * oh * ow + i * ow + j] = src[(i / s) * w + j / s];
            }
        }
    }
    let mut shape = y.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Tensor::new(shape, out)
}

/// Keeps the top-left pixel of every `s x s` block of the two trailing axes.
pub fn nearest_subsample(x: &Tensor, s: usize) -> Result<Tensor> {
    let (planes, h, w) = check_spatial(x, "nearest_subsample")?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Contract(format!(
            "factor {s} does not divide spatial shape {h}x{w}"
        )));
    }
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                out[p * oh * ow + i * ow + j] = src[i * s * w + j * s];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Tensor::new(shape, out)
}

/// Conventional bicubic enlargement of the two trailing axes by `s`, used
/// as the interpolation baseline.
pub fn bicubic_upsample(y: &Tensor, s: usize) -> Result<Tensor> {
    if s == 0 {
        return Err(Error::Contract("upsampling factor must be positive".into()));
    }
    let (planes, h, w) = check_spatial(y, "bicubic_upsample")?;
    let rows = bicubic_weights(h, h * s).as_f32();
    let cols = bicubic_weights(w, w * s).as_f32();
    let out = separable_apply(y.data(), planes, (&rows, h, h * s), (&cols, w, w * s));
    let mut shape = y.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = h * s;
    shape[nd - 1] = w * s;
    Tensor::new(shape, out)
}

/// Maps 8-bit levels to `[0, 1)` as `(k + u) / 256` with fresh
/// `u ~ Uniform[0, 1)` per pixel.
pub fn dequantize(img8: &[u8], shape: &[usize], rng: &mut RngStream) -> Result<Tensor> {
    let data = img8
        .iter()
        .map(|&k| ((k as f64 + rng.uniform()) / 256.0) as f32)
        // f32 rounding can land exactly on the next level; keep it below.
        .map(|v| v.min(1.0 - f32::EPSILON / 2.0))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Deterministic counterpart of [`dequantize`]: the centre `(k + 0.5) / 256`
/// of each level.
pub fn level_centers(img8: &[u8], shape: &[usize]) -> Result<Tensor> {
    let data = img8.iter().map(|&k| (k as f32 + 0.5) / 256.0).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Inverse of [`level_centers`]: clamps to `[0, 1)` and rounds to the
/// nearest level centre.
pub fn quantize(x: &Tensor) -> Vec<u8> {
    x.data()
        .iter()
        .map(|&v| (v as f64 * 256.0 - 0.5).round().clamp(0.0, 255.0) as u8)
        .collect()
}
