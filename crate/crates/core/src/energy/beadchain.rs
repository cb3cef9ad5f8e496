//! Bonded-term energies and analytic gradients for bead chains.

use super::EnergyError;
use crate::core::SystemSpec;
use ndarray::Array2;

const COINCIDENT_DIST: f64 = 1e-12;

fn row(pos: &Array2<f64>, i: usize) -> [f64; 3] {
    let d = pos.ncols();
    let mut out = [0.0; 3];
    for c in 0..d {
        out[c] = pos[[i, c]];
    }
    out
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add_row(forces: &mut Array2<f64>, i: usize, v: [f64; 3]) {
    let d = forces.ncols();
    for c in 0..d {
        forces[[i, c]] += v[c];
    }
}

/// Signed dihedral over atoms `i-j-k-l` in radians, in (-pi, pi].
pub fn dihedral_angle(pos: &Array2<f64>, i: usize, j: usize, k: usize, l: usize) -> f64 {
    let b1 = sub(row(pos, j), row(pos, i));
    let b2 = sub(row(pos, k), row(pos, j));
    let b3 = sub(row(pos, l), row(pos, k));
    let n1 = cross(b1, b2);
    let n2 = cross(b2, b3);
    let m = cross(n1, scale(b2, 1.0 / norm(b2)));
    (dot(m, n2)).atan2(dot(n1, n2))
}

pub fn energy(system: &SystemSpec, pos: &Array2<f64>) -> Result<f64, EnergyError> {
    let mut u = 0.0;
    for b in &system.bonds {
        let r = norm(sub(row(pos, b.i), row(pos, b.j)));
        u += b.k_b * (r - b.r0).powi(2);
    }
    for a in &system.angles {
        let theta = angle_value(pos, a.i, a.j, a.k);
        u += a.k_a * (theta - a.theta0).powi(2);
    }
    for d in &system.dihedrals {
        let phi = dihedral_angle(pos, d.i, d.j, d.k, d.l);
        u += d.k_d * (1.0 + (d.n as f64 * phi - d.phi0).cos());
    }
    let sigma = system.nonbonded_sigma;
    if sigma > 0.0 {
        let cutoff = 3.0 * sigma;
        for (i, j) in system.nonbonded_pairs() {
            let r = norm(sub(row(pos, i), row(pos, j)));
            if r < COINCIDENT_DIST {
                return Err(EnergyError::CoincidentAtoms { i, j, dist: r });
            }
            if r < cutoff {
                u += (sigma / r).powi(12);
            }
        }
    }
    Ok(u)
}

pub fn force(system: &SystemSpec, pos: &Array2<f64>) -> Result<Array2<f64>, EnergyError> {
    let mut f = Array2::zeros(pos.dim());
    for b in &system.bonds {
        let rij = sub(row(pos, b.i), row(pos, b.j));
        let r = norm(rij);
        if r > 0.0 {
            // dU/dr = 2 k_b (r - r0); force on i along -dU/dr_i
            let coeff = -2.0 * b.k_b * (r - b.r0) / r;
            add_row(&mut f, b.i, scale(rij, coeff));
            add_row(&mut f, b.j, scale(rij, -coeff));
        }
    }
    for a in &system.angles {
        let (theta, gi, gj, gk) = angle_gradient(pos, a.i, a.j, a.k);
        let du = 2.0 * a.k_a * (theta - a.theta0);
        add_row(&mut f, a.i, scale(gi, -du));
        add_row(&mut f, a.j, scale(gj, -du));
        add_row(&mut f, a.k, scale(gk, -du));
    }
    for d in &system.dihedrals {
        let (phi, gi, gj, gk, gl) = dihedral_gradient(pos, d.i, d.j, d.k, d.l);
        let du = -d.k_d * d.n as f64 * (d.n as f64 * phi - d.phi0).sin();
        add_row(&mut f, d.i, scale(gi, -du));
        add_row(&mut f, d.j, scale(gj, -du));
        add_row(&mut f, d.k, scale(gk, -du));
        add_row(&mut f, d.l, scale(gl, -du));
    }
    let sigma = system.nonbonded_sigma;
    if sigma > 0.0 {
        let cutoff = 3.0 * sigma;
        for (i, j) in system.nonbonded_pairs() {
            let rij = sub(row(pos, i), row(pos, j));
            let r = norm(rij);
            if r < COINCIDENT_DIST {
                return Err(EnergyError::CoincidentAtoms { i, j, dist: r });
            }
            if r < cutoff {
                // U = (sigma/r)^12, dU/dr = -12 sigma^12 r^-13
                let coeff = 12.0 * sigma.powi(12) / r.powi(14);
                add_row(&mut f, i, scale(rij, coeff));
                add_row(&mut f, j, scale(rij, -coeff));
            }
        }
    }
    Ok(f)
}

fn angle_value(pos: &Array2<f64>, i: usize, j: usize, k: usize) -> f64 {
    let u = sub(row(pos, i), row(pos, j));
    let v = sub(row(pos, k), row(pos, j));
    let c = (dot(u, v) / (norm(u) * norm(v))).clamp(-1.0, 1.0);
    c.acos()
}

/// Angle and its gradient with respect to the three atoms.
fn angle_gradient(
    pos: &Array2<f64>,
    i: usize,
    j: usize,
    k: usize,
) -> (f64, [f64; 3], [f64; 3], [f64; 3]) {
    let u = sub(row(pos, i), row(pos, j));
    let v = sub(row(pos, k), row(pos, j));
    let nu = norm(u);
    let nv = norm(v);
    let cu = scale(u, 1.0 / nu);
    let cv = scale(v, 1.0 / nv);
    let cos_t = dot(cu, cv).clamp(-1.0, 1.0);
    let theta = cos_t.acos();
    let sin_t = (1.0 - cos_t * cos_t).sqrt().max(1e-12);
    // d theta / d u = (cos_t * u_hat - v_hat) / (|u| sin_t)
    let gi = scale(sub(scale(cu, cos_t), cv), 1.0 / (nu * sin_t));
    let gk = scale(sub(scale(cv, cos_t), cu), 1.0 / (nv * sin_t));
    let gj = [-gi[0] - gk[0], -gi[1] - gk[1], -gi[2] - gk[2]];
    (theta, gi, gj, gk)
}

/// Dihedral and its gradient with respect to the four atoms.
fn dihedral_gradient(
    pos: &Array2<f64>,
    i: usize,
    j: usize,
    k: usize,
    l: usize,
) -> (f64, [f64; 3], [f64; 3], [f64; 3], [f64; 3]) {
    let b1 = sub(row(pos, j), row(pos, i));
    let b2 = sub(row(pos, k), row(pos, j));
    let b3 = sub(row(pos, l), row(pos, k));
    let n1 = cross(b1, b2);
    let n2 = cross(b2, b3);
    let nb2 = norm(b2);
    let phi = {
        let m = cross(n1, scale(b2, 1.0 / nb2));
        (dot(m, n2)).atan2(dot(n1, n2))
    };
    let n1_sq = dot(n1, n1).max(1e-24);
    let n2_sq = dot(n2, n2).max(1e-24);
    let gi = scale(n1, nb2 / n1_sq);
    let gl = scale(n2, -nb2 / n2_sq);
    let c1 = dot(b1, b2) / (nb2 * nb2);
    let c2 = dot(b3, b2) / (nb2 * nb2);
    let gj = [
        -(1.0 + c1) * gi[0] + c2 * gl[0],
        -(1.0 + c1) * gi[1] + c2 * gl[1],
        -(1.0 + c1) * gi[2] + c2 * gl[2],
    ];
    let gk = [
        c1 * gi[0] - (1.0 + c2) * gl[0],
        c1 * gi[1] - (1.0 + c2) * gl[1],
        c1 * gi[2] - (1.0 + c2) * gl[2],
    ];
    (phi, gi, gj, gk, gl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::RngStream;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn dihedral_angle_of_planar_cis_is_zero() {
        // all four atoms in the xy plane, bent back on itself (cis)
        let pos = array![
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0]
        ];
        assert_abs_diff_eq!(dihedral_angle(&pos, 0, 1, 2, 3), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn dihedral_angle_of_planar_trans_is_pi() {
        let pos = array![
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, -1.0, 0.0]
        ];
        assert_abs_diff_eq!(
            dihedral_angle(&pos, 0, 1, 2, 3).abs(),
            std::f64::consts::PI,
            epsilon = 1e-12
        );
    }

    #[test]
    fn dihedral_sign_flips_under_mirror() {
        let mut rng = RngStream::new(21, 0);
        for _ in 0..20 {
            let mut pos = Array2::zeros((4, 3));
            for i in 0..4 {
                pos[[i, 0]] = i as f64 + 0.3 * rng.normal();
                pos[[i, 1]] = 0.6 * rng.normal();
                pos[[i, 2]] = 0.6 * rng.normal();
            }
            let phi = dihedral_angle(&pos, 0, 1, 2, 3);
            let mut mirrored = pos.clone();
            for i in 0..4 {
                mirrored[[i, 2]] = -mirrored[[i, 2]];
            }
            let phi_m = dihedral_angle(&mirrored, 0, 1, 2, 3);
            assert_abs_diff_eq!(phi, -phi_m, epsilon = 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = RngStream::new(22, 0);
        for _ in 0..50 {
            let mut pos = Array2::zeros((4, 3));
            for i in 0..4 {
                pos[[i, 0]] = i as f64 + 0.3 * rng.normal();
                pos[[i, 1]] = 0.5 * rng.normal();
                pos[[i, 2]] = 0.5 * rng.normal();
            }
            let h = 1e-6;
            let (_, gi, gj, gk, gl) = dihedral_gradient(&pos, 0, 1, 2, 3);
            let grads = [gi, gj, gk, gl];
            for atom in 0..4 {
                for c in 0..3 {
                    let mut p = pos.clone();
                    let mut m = pos.clone();
                    p[[atom, c]] += h;
                    m[[atom, c]] -= h;
                    let mut dphi = dihedral_angle(&p, 0, 1, 2, 3) - dihedral_angle(&m, 0, 1, 2, 3);
                    // handle wrap-around in the finite difference
                    if dphi > std::f64::consts::PI {
                        dphi -= 2.0 * std::f64::consts::PI;
                    }
                    if dphi < -std::f64::consts::PI {
                        dphi += 2.0 * std::f64::consts::PI;
                    }
                    let fd = dphi / (2.0 * h);
                    assert_abs_diff_eq!(grads[atom][c], fd, epsilon = 1e-5);
                }
            }

            let (_, ai, aj, ak) = angle_gradient(&pos, 0, 1, 2);
            let agrads = [ai, aj, ak];
            for atom in 0..3 {
                for c in 0..3 {
                    let mut p = pos.clone();
                    let mut m = pos.clone();
                    p[[atom, c]] += h;
                    m[[atom, c]] -= h;
                    let fd = (angle_value(&p, 0, 1, 2) - angle_value(&m, 0, 1, 2)) / (2.0 * h);
                    assert_abs_diff_eq!(agrads[atom][c], fd, epsilon = 1e-5);
                }
            }
        }
    }
}
