//! Writes a softmax matrix as binary and CSV, reads both back and checks
//! they agree.
//!
//! `cargo run --example matrix_io`

use simconf::data::{load_matrix, validate_softmax, write_matrix, Dtype, Matrix, MatrixFormat};

fn main() -> simconf::Result<()> {
    let dir = std::env::temp_dir().join(format!("simconf-matrix-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let m = Matrix::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.25, 0.5, 0.25]])?;
    let bin = dir.join("softmax.cpm");
    let csv = dir.join("softmax.csv");
    write_matrix(&bin, &m, MatrixFormat::Binary, Dtype::F64)?;
    write_matrix(&csv, &m, MatrixFormat::Csv, Dtype::F64)?;
    let a = load_matrix(&bin, MatrixFormat::from_path(&bin))?;
    let b = load_matrix(&csv, MatrixFormat::from_path(&csv))?;
    assert_eq!(a, b);
    let softmax = validate_softmax(a)?;
    println!(
        "{} samples x {} classes, binary {} bytes, identical after round trip",
        softmax.n_samples(),
        softmax.n_classes(),
        std::fs::metadata(&bin)?.len()
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
