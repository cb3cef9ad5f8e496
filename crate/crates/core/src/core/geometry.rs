use super::{CoreError, RngStream};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2};

/// Mean position over atoms (the centroid used for canonicalisation).
pub fn center_of_geometry(positions: &Array2<f64>) -> Result<Array1<f64>, CoreError> {
    if positions.nrows() == 0 {
        return Err(CoreError::EmptyPositions);
    }
    Ok(positions.mean_axis(ndarray::Axis(0)).expect("nonempty"))
}

fn check_rotation(rotation: &Array2<f64>) -> Result<(), CoreError> {
    let d = rotation.nrows();
    if rotation.ncols() != d {
        return Err(CoreError::NotARotation {
            reason: format!("shape {}x{} is not square", rotation.nrows(), rotation.ncols()),
        });
    }
    let m = DMatrix::from_fn(d, d, |r, c| rotation[[r, c]]);
    let gram = m.transpose() * &m;
    for r in 0..d {
        for c in 0..d {
            let want = if r == c { 1.0 } else { 0.0 };
            if (gram[(r, c)] - want).abs() > 1e-10 {
                return Err(CoreError::NotARotation {
                    reason: format!("R^T R deviates from identity at ({r}, {c})"),
                });
            }
        }
    }
    let det = m.determinant();
    if (det - 1.0).abs() > 1e-10 {
        return Err(CoreError::NotARotation {
            reason: format!("determinant {det} is not +1"),
        });
    }
    Ok(())
}

/// Apply the rigid motion `x -> R x + a` to every row.
pub fn apply_rigid_motion(
    positions: &Array2<f64>,
    rotation: &Array2<f64>,
    translation: &Array1<f64>,
) -> Result<Array2<f64>, CoreError> {
    check_rotation(rotation)?;
    let mut out = positions.dot(&rotation.t());
    for mut row in out.rows_mut() {
        row += translation;
    }
    Ok(out)
}

/// Uniform random rotation: orthogonalize a Gaussian matrix and fix the
/// determinant sign. `d == 1` returns the 1x1 identity.
pub fn random_rotation(d: usize, rng: &mut RngStream) -> Array2<f64> {
    if d == 1 {
        return Array2::eye(1);
    }
    let gauss = DMatrix::from_fn(d, d, |_, _| rng.normal());
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign-correct columns so the distribution is Haar, then force det +1
    for c in 0..d {
        if r[(c, c)] < 0.0 {
            for row in 0..d {
                q[(row, c)] = -q[(row, c)];
            }
        }
    }
    if q.determinant() < 0.0 {
        for row in 0..d {
            q[(row, d - 1)] = -q[(row, d - 1)];
        }
    }
    Array2::from_shape_fn((d, d), |(r, c)| q[(r, c)])
}
