//! Shared domain types and the on-disk formats for matrices, labels and
//! class partitions.
//!
//! Binary matrices use a small self-describing layout:
//!
//! ```text
//! "CPM1" | rows: u32 LE | cols: u32 LE | dtype: u8 (0 = f32, 1 = f64) | row-major payload (LE)
//! ```
//!
//! CSV matrices have no header, one comma-separated row per line. Labels are
//! one integer per line and partitions are `class_id,group_id` pairs. All
//! indices are 0-based. Values are always held as `f64` in memory.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{bail, Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"CPM1";

/// Absolute tolerance on a softmax row sum.
pub const SOFTMAX_SUM_TOLERANCE: f64 = 1e-6;

/// Rows whose sum is already this close to one are left untouched, which
/// keeps [`validate_softmax`] idempotent.
const RENORMALIZE_EPS: f64 = 1e-12;

/// Symmetry tolerance for similarity matrices.
pub const SIMILARITY_SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            bail!(
                Format,
                "matrix declared {rows}x{cols} but holds {} values",
                values.len()
            );
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                bail!(Format, "row {i} has {} columns, expected {cols}", r.len());
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            bail!(
                Data,
                "non-finite value at row {}, column {}",
                pos / self.cols,
                pos % self.cols
            );
        }
        Ok(())
    }
}

/// Element type of a binary matrix payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => bail!(Format, "unknown dtype tag {other}"),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Binary,
    Csv,
}

impl MatrixFormat {
    /// `.csv` files are CSV, anything else is the binary layout.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Binary,
        }
    }
}

pub fn load_matrix(path: &Path, format: MatrixFormat) -> Result<Matrix> {
    let file = fs::File::open(path)?;
    match format {
        MatrixFormat::Binary => read_matrix_binary(BufReader::new(file)),
        MatrixFormat::Csv => read_matrix_csv(BufReader::new(file)),
    }
}

pub fn write_matrix(
    path: &Path,
    matrix: &Matrix,
    format: MatrixFormat,
    dtype: Dtype,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    match format {
        MatrixFormat::Binary => write_matrix_binary(&mut out, matrix, dtype)?,
        MatrixFormat::Csv => write_matrix_csv(&mut out, matrix)?,
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix_binary<R: Read>(mut reader: R) -> Result<Matrix> {
    let mut header = [0u8; 13];
    reader
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated binary matrix header".into()))?;
    if &header[..4] != MATRIX_MAGIC {
        bail!(Format, "bad magic bytes {:?}", &header[..4]);
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let dtype = Dtype::from_tag(header[12])?;
    if rows == 0 || cols == 0 {
        bail!(Format, "degenerate matrix shape {rows}x{cols}");
    }

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let expected = rows * cols * dtype.width();
    if payload.len() != expected {
        bail!(
            Format,
            "payload holds {} bytes, header declares {rows}x{cols} ({expected} bytes)",
            payload.len()
        );
    }
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let m = Matrix::new(rows, cols, values)?;
    m.check_finite()?;
    Ok(m)
}

pub fn write_matrix_binary<W: Write>(out: &mut W, matrix: &Matrix, dtype: Dtype) -> Result<()> {
    let rows = u32::try_from(matrix.rows).map_err(|_| Error::Input("too many rows".into()))?;
    let cols = u32::try_from(matrix.cols).map_err(|_| Error::Input("too many columns".into()))?;
    out.write_all(MATRIX_MAGIC)?;
    out.write_all(&rows.to_le_bytes())?;
    out.write_all(&cols.to_le_bytes())?;
    out.write_all(&[dtype.tag()])?;
    for &v in &matrix.values {
        match dtype {
            Dtype::F32 => out.write_all(&(v as f32).to_le_bytes())?,
            Dtype::F64 => out.write_all(&v.to_le_bytes())?,
        }
    }
    Ok(())
}

pub fn read_matrix_csv<R: BufRead>(reader: R) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|field| {
                field.trim().parse::<f64>().map_err(|_| {
                    Error::Format(format!("line {}: cannot parse {field:?}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!(Format, "empty CSV matrix");
    }
    let m = Matrix::from_rows(&rows)?;
    m.check_finite()?;
    Ok(m)
}

pub fn write_matrix_csv<W: Write>(out: &mut W, matrix: &Matrix) -> Result<()> {
    for row in matrix.iter_rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.write_all(b",")?;
            }
            first = false;
            write!(out, "{v}")?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Row-stochastic classifier output, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMatrix(Matrix);

impl SoftmaxMatrix {
    pub fn n_samples(&self) -> usize {
        self.0.rows
    }

    pub fn n_classes(&self) -> usize {
        self.0.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Copy of the selected rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> SoftmaxMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.n_classes());
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        SoftmaxMatrix(Matrix {
            rows: rows.len(),
            cols: self.n_classes(),
            values,
        })
    }
}

/// Checks the softmax invariants and renormalizes rows that are within
/// tolerance of summing to one.
pub fn validate_softmax(matrix: Matrix) -> Result<SoftmaxMatrix> {
    if matrix.cols < 2 {
        bail!(
            Data,
            "softmax needs at least 2 classes, got {}",
            matrix.cols
        );
    }
    if matrix.rows == 0 {
        bail!(Data, "softmax matrix has no rows");
    }
    let mut matrix = matrix;
    let cols = matrix.cols;
    for (i, row) in matrix.values.chunks_exact_mut(cols).enumerate() {
        if let Some(j) = row
            .iter()
            .position(|&v| !(0.0..=1.0 + SOFTMAX_SUM_TOLERANCE).contains(&v))
        {
            bail!(Data, "row {i}: entry {j} = {} outside [0, 1]", row[j]);
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SOFTMAX_SUM_TOLERANCE {
            bail!(
                Data,
                "row {i}: sums to {sum}, outside tolerance {SOFTMAX_SUM_TOLERANCE}"
            );
        }
        if (sum - 1.0).abs() > RENORMALIZE_EPS {
            for v in row.iter_mut() {
                *v = (*v / sum).min(1.0);
            }
        }
    }
    Ok(SoftmaxMatrix(matrix))
}

/// True class index per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<usize>);

impl LabelVector {
    pub fn new(labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= n_classes) {
            bail!(Data, "label {y} at position {i} outside [0, {n_classes})");
        }
        Ok(Self(labels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn get(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn select(&self, rows: &[usize]) -> LabelVector {
        LabelVector(rows.iter().map(|&r| self.0[r]).collect())
    }
}

pub fn load_labels(path: &Path, n_classes: usize) -> Result<LabelVector> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut labels = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let y = line
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("line {}: bad label {line:?}", lineno + 1)))?;
        labels.push(y);
    }
    LabelVector::new(labels, n_classes)
}

pub fn write_labels(path: &Path, labels: &LabelVector) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for y in &labels.0 {
        writeln!(out, "{y}")?;
    }
    out.flush()?;
    Ok(())
}

/// Assignment of each class to a group (superclass).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPartition {
    group_of: Vec<usize>,
    n_groups: usize,
}

impl ClassPartition {
    /// Groups are numbered `0..G` with `G = max + 1`; every group must be used.
    pub fn new(group_of: Vec<usize>) -> Result<Self> {
        if group_of.is_empty() {
            bail!(Data, "partition covers no classes");
        }
        let n_groups = group_of.iter().max().unwrap() + 1;
        let mut seen = vec![false; n_groups];
        for &g in &group_of {
            seen[g] = true;
        }
        if let Some(g) = seen.iter().position(|s| !s) {
            bail!(Data, "group {g} has no classes");
        }
        Ok(Self { group_of, n_groups })
    }

    /// `n_groups` consecutive blocks of `group_size` classes.
    pub fn equal_blocks(n_groups: usize, group_size: usize) -> Result<Self> {
        if n_groups == 0 || group_size == 0 {
            bail!(Input, "equal_blocks needs positive group count and size");
        }
        Self::new((0..n_groups * group_size).map(|c| c / group_size).collect())
    }

    pub fn n_classes(&self) -> usize {
        self.group_of.len()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn group_of(&self, class: usize) -> usize {
        self.group_of[class]
    }

    pub fn groups(&self) -> &[usize] {
        &self.group_of
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups];
        for &g in &self.group_of {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn classes_in_group(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        self.group_of
            .iter()
            .enumerate()
            .filter(move |(_, &g)| g == group)
            .map(|(c, _)| c)
    }
}

pub fn load_partition(path: &Path) -> Result<ClassPartition> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| {
                Error::Format(format!("line {}: bad partition entry {line:?}", lineno + 1))
            })
        };
        let mut fields = line.split(',');
        let (Some(c), Some(g), None) = (fields.next(), fields.next(), fields.next()) else {
            bail!(Format, "line {}: expected class_id,group_id", lineno + 1);
        };
        pairs.push((parse(c)?, parse(g)?));
    }
    partition_from_pairs(&pairs)
}

pub fn partition_from_pairs(pairs: &[(usize, usize)]) -> Result<ClassPartition> {
    let n_classes = pairs.iter().map(|&(c, _)| c + 1).max().unwrap_or(0);
    let mut group_of: Vec<Option<usize>> = vec![None; n_classes];
    for &(c, g) in pairs {
        if group_of[c].replace(g).is_some() {
            bail!(Format, "class {c} listed more than once");
        }
    }
    let group_of = group_of
        .into_iter()
        .enumerate()
        .map(|(c, g)| g.ok_or_else(|| Error::Format(format!("class {c} missing from partition"))))
        .collect::<Result<Vec<_>>>()?;
    ClassPartition::new(group_of).map_err(|e| match e {
        Error::Data(msg) => Error::Format(msg),
        other => other,
    })
}

pub fn write_partition(path: &Path, partition: &ClassPartition) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for (c, g) in partition.group_of.iter().enumerate() {
        writeln!(out, "{c},{g}")?;
    }
    out.flush()?;
    Ok(())
}

/// Symmetric class-similarity matrix with unit diagonal and entries at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Matrix);

impl SimilarityMatrix {
    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        let n = matrix.rows;
        if n != matrix.cols || n == 0 {
            bail!(
                Data,
                "similarity matrix must be square, got {}x{}",
                n,
                matrix.cols
            );
        }
        matrix.check_finite()?;
        let mut matrix = matrix;
        for i in 0..n {
            for j in 0..n {
                let v = matrix.get(i, j);
                if v > 1.0 + SIMILARITY_SYMMETRY_TOLERANCE {
                    bail!(Data, "similarity entry ({i},{j}) = {v} exceeds 1");
                }
                if j > i && (v - matrix.get(j, i)).abs() > SIMILARITY_SYMMETRY_TOLERANCE {
                    bail!(Data, "similarity matrix not symmetric at ({i},{j})");
                }
            }
            if (matrix.get(i, i) - 1.0).abs() > SIMILARITY_SYMMETRY_TOLERANCE {
                bail!(
                    Data,
                    "similarity diagonal entry {i} = {} is not 1",
                    matrix.get(i, i)
                );
            }
        }
        for v in matrix.values.iter_mut() {
            *v = v.min(1.0);
        }
        for i in 0..n {
            matrix.values[i * n + i] = 1.0;
        }
        Ok(Self(matrix))
    }

    pub fn identity(n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Self(Matrix {
            rows: n,
            cols: n,
            values,
        })
    }

    /// Wraps values already known to satisfy the invariants.
    pub(crate) fn from_trusted(matrix: Matrix) -> Self {
        Self(matrix)
    }

    pub fn n_classes(&self) -> usize {
        self.0.rows
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.0.get(a, b)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Penultimate-layer features with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Matrix,
    labels: LabelVector,
}

impl FeatureMatrix {
    pub fn new(values: Matrix, labels: LabelVector) -> Result<Self> {
        if values.cols == 0 {
            bail!(Data, "features need dimension >= 1");
        }
        if values.rows != labels.len() {
            bail!(
                Data,
                "{} feature rows but {} labels",
                values.rows,
                labels.len()
            );
        }
        Ok(Self { values, labels })
    }

    pub fn n_samples(&self) -> usize {
        self.values.rows
    }

    pub fn dim(&self) -> usize {
        self.values.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn labels(&self) -> &LabelVector {
        &self.labels
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    pub alpha: f64,
    pub seed: u64,
    pub lambda: f64,
}

impl CalibrationConfig {
    pub fn new(alpha: f64, seed: u64, lambda: f64) -> Result<Self> {
        check_alpha(alpha)?;
        check_lambda(lambda)?;
        Ok(Self {
            alpha,
            seed,
            lambda,
        })
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        bail!(Config, "alpha must lie in (0, 1), got {alpha}");
    }
    Ok(())
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        bail!(Config, "lambda must be finite and >= 0, got {lambda}");
    }
    Ok(())
}

/// Split-conformal threshold together with the setting it was computed under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedThreshold {
    /// `+inf` when the calibration set is too small for the requested level.
    pub q_hat: f64,
    pub alpha: f64,
    pub n_cal: usize,
    pub lambda: f64,
}

/// A conformal prediction set. `classes` is strictly increasing and may be empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    classes: Vec<usize>,
    predicted_class: usize,
}

impl PredictionSet {
    /// `classes` must be strictly increasing.
    pub fn new(classes: Vec<usize>, predicted_class: usize) -> Self {
        debug_assert!(classes.windows(2).all(|w| w[0] < w[1]));
        Self {
            classes,
            predicted_class,
        }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn predicted_class(&self) -> usize {
        self.predicted_class
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.binary_search(&class).is_ok()
    }

    /// Sorted distinct groups represented in the set.
    pub fn groups(&self, partition: &ClassPartition) -> Vec<usize> {
        let mut groups: Vec<usize> = self
            .classes
            .iter()
            .map(|&c| partition.group_of(c))
            .collect();
        groups.sort_unstable();
        groups.dedup();
        groups
    }

    pub fn superclass_count(&self, partition: &ClassPartition) -> usize {
        self.groups(partition).len()
    }
}
