//! Potential-energy surfaces, analytic forces, and the augmented target
//! density the samplers draw from.
//!
//! Three surfaces are provided: a 1-D double well and the 2-D
//! Mueller-Brown surface (both with quadrature-friendly closed forms) and
//! a bead chain whose bonded terms come from the [`SystemSpec`]. All
//! units are reduced (k_B = 1).

mod beadchain;

use crate::core::{log_standard_normal, State, SystemSpec};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("positions shape {rows}x{cols} does not match potential (want {want_rows}x{want_cols})")]
    Shape {
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("non-finite positions passed to potential")]
    NonFinite,
    #[error("coincident atoms in nonbonded pair ({i}, {j}): distance {dist:e}")]
    CoincidentAtoms { i: usize, j: usize, dist: f64 },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
}

/// One exponential term of the Mueller-Brown surface:
/// `amplitude * exp(a dx^2 + b dx dy + c dy^2)` with `dx = x - x0`,
/// `dy = y - y0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuellerBrownTerm {
    pub amplitude: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub x0: f64,
    pub y0: f64,
}

/// The conventional four-term constants, scaled by `scale` so the minima
/// are separated by a few k_B T at T = 1.
pub fn mueller_brown_default_terms() -> [MuellerBrownTerm; 4] {
    [
        MuellerBrownTerm { amplitude: -200.0, a: -1.0, b: 0.0, c: -10.0, x0: 1.0, y0: 0.0 },
        MuellerBrownTerm { amplitude: -100.0, a: -1.0, b: 0.0, c: -10.0, x0: 0.0, y0: 0.5 },
        MuellerBrownTerm { amplitude: -170.0, a: -6.5, b: 11.0, c: -6.5, x0: -0.5, y0: 1.5 },
        MuellerBrownTerm { amplitude: 15.0, a: 0.7, b: 0.6, c: 0.7, x0: -1.0, y0: 1.0 },
    ]
}

/// Functional form of a potential-energy surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum PotentialForm {
    /// `U(x) = barrier * (x^2 - offset^2)^2` on one atom in one dimension;
    /// wells at +-offset, barrier height `barrier * offset^4` at the origin.
    DoubleWell1D { barrier: f64, offset: f64 },
    /// Four-term Mueller-Brown surface on one atom in two dimensions,
    /// multiplied by `scale`.
    MuellerBrown2D {
        terms: [MuellerBrownTerm; 4],
        scale: f64,
    },
    /// Bonded terms plus truncated `r^-12` repulsion, all read from the
    /// system spec.
    BeadChain,
}

/// A potential-energy surface at a fixed simulation temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    pub form: PotentialForm,
    pub temperature: f64,
}

impl Potential {
    pub fn double_well(barrier: f64, offset: f64, temperature: f64) -> Self {
        Potential {
            form: PotentialForm::DoubleWell1D { barrier, offset },
            temperature,
        }
    }

    pub fn mueller_brown(scale: f64, temperature: f64) -> Self {
        Potential {
            form: PotentialForm::MuellerBrown2D {
                terms: mueller_brown_default_terms(),
                scale,
            },
            temperature,
        }
    }

    pub fn bead_chain(temperature: f64) -> Self {
        Potential {
            form: PotentialForm::BeadChain,
            temperature,
        }
    }

    fn check_shape(&self, system: &SystemSpec, positions: &Array2<f64>) -> Result<(), EnergyError> {
        let (want_rows, want_cols) = match self.form {
            PotentialForm::DoubleWell1D { .. } => (1, 1),
            PotentialForm::MuellerBrown2D { .. } => (1, 2),
            PotentialForm::BeadChain => (system.n_atoms, system.dimension),
        };
        if positions.dim() != (want_rows, want_cols) {
            return Err(EnergyError::Shape {
                rows: positions.nrows(),
                cols: positions.ncols(),
                want_rows,
                want_cols,
            });
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(EnergyError::NonFinite);
        }
        Ok(())
    }

    /// Potential energy `U` at the given configuration.
    pub fn energy(&self, system: &SystemSpec, positions: &Array2<f64>) -> Result<f64, EnergyError> {
        self.check_shape(system, positions)?;
        match &self.form {
            PotentialForm::DoubleWell1D { barrier, offset } => {
                let x = positions[[0, 0]];
                Ok(barrier * (x * x - offset * offset).powi(2))
            }
            PotentialForm::MuellerBrown2D { terms, scale } => {
                let (x, y) = (positions[[0, 0]], positions[[0, 1]]);
                let mut u = 0.0;
                for t in terms {
                    let (dx, dy) = (x - t.x0, y - t.y0);
                    u += t.amplitude * (t.a * dx * dx + t.b * dx * dy + t.c * dy * dy).exp();
                }
                Ok(scale * u)
            }
            PotentialForm::BeadChain => beadchain::energy(system, positions),
        }
    }

    /// Analytic force `-grad U` at the given configuration.
    pub fn force(&self, system: &SystemSpec, positions: &Array2<f64>) -> Result<Array2<f64>, EnergyError> {
        self.check_shape(system, positions)?;
        match &self.form {
            PotentialForm::DoubleWell1D { barrier, offset } => {
                let x = positions[[0, 0]];
                let grad = 4.0 * barrier * x * (x * x - offset * offset);
                Ok(Array2::from_elem((1, 1), -grad))
            }
            PotentialForm::MuellerBrown2D { terms, scale } => {
                let (x, y) = (positions[[0, 0]], positions[[0, 1]]);
                let (mut gx, mut gy) = (0.0, 0.0);
                for t in terms {
                    let (dx, dy) = (x - t.x0, y - t.y0);
                    let e = t.amplitude * (t.a * dx * dx + t.b * dx * dy + t.c * dy * dy).exp();
                    gx += e * (2.0 * t.a * dx + t.b * dy);
                    gy += e * (t.b * dx + 2.0 * t.c * dy);
                }
                let mut f = Array2::zeros((1, 2));
                f[[0, 0]] = -scale * gx;
                f[[0, 1]] = -scale * gy;
                Ok(f)
            }
            PotentialForm::BeadChain => beadchain::force(system, positions),
        }
    }
}

/// Kinetic energy `sum_i m_i |v_i|^2 / 2`. The sampling path never uses
/// physical velocities; this exists for integrator diagnostics.
pub fn kinetic_energy(velocities: &Array2<f64>, masses: &[f64]) -> f64 {
    velocities
        .rows()
        .into_iter()
        .zip(masses)
        .map(|(row, &m)| 0.5 * m * row.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// The joint target over positions and auxiliaries: Boltzmann weight on
/// positions times a standard normal on the auxiliary channel.
#[derive(Debug, Clone)]
pub struct AugmentedTarget {
    pub potential: Potential,
    pub temperature: f64,
}

impl AugmentedTarget {
    pub fn new(potential: Potential) -> Result<Self, EnergyError> {
        let temperature = potential.temperature;
        if !(temperature > 0.0) {
            return Err(EnergyError::BadTemperature(temperature));
        }
        Ok(AugmentedTarget { potential, temperature })
    }

    /// Log of the augmented density, up to the position partition constant:
    /// `-U(x^p)/T + log N(x^v; 0, I)`. The Gaussian factor carries its full
    /// normalizer; MH ratios cancel the missing position constant.
    pub fn log_mu_aug(&self, state: &State) -> Result<f64, EnergyError> {
        let u = self.potential.energy(&state.system, &state.positions)?;
        Ok(-u / self.temperature + log_standard_normal(&state.auxiliaries))
    }

    /// Position term alone, `-U(x^p)/T`.
    pub fn log_position_term(&self, system: &SystemSpec, positions: &Array2<f64>) -> Result<f64, EnergyError> {
        Ok(-self.potential.energy(system, positions)? / self.temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{apply_rigid_motion, random_rotation, RngStream};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use std::sync::Arc;

    fn dw_system() -> SystemSpec {
        SystemSpec::point_system("dw", 1, 1)
    }

    /// Central finite-difference gradient oracle.
    fn fd_force(pot: &Potential, system: &SystemSpec, positions: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut out = Array2::zeros(positions.dim());
        for r in 0..positions.nrows() {
            for c in 0..positions.ncols() {
                let mut plus = positions.clone();
                let mut minus = positions.clone();
                plus[[r, c]] += h;
                minus[[r, c]] -= h;
                let up = pot.energy(system, &plus).unwrap();
                let um = pot.energy(system, &minus).unwrap();
                out[[r, c]] = -(up - um) / (2.0 * h);
            }
        }
        out
    }

    fn assert_force_matches_fd(pot: &Potential, system: &SystemSpec, positions: &Array2<f64>) {
        let analytic = pot.force(system, positions).unwrap();
        let fd = fd_force(pot, system, positions, 1e-5);
        let scale = analytic.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, f) in analytic.iter().zip(fd.iter()) {
            assert!(
                (a - f).abs() / scale < 1e-5,
                "force mismatch: analytic {a} vs fd {f} (scale {scale})"
            );
        }
    }

    #[test]
    fn double_well_zero_at_minima() {
        let pot = Potential::double_well(2.0, 1.3, 1.0);
        let sys = dw_system();
        for x in [1.3, -1.3] {
            let u = pot.energy(&sys, &array![[x]]).unwrap();
            assert_abs_diff_eq!(u, 0.0, epsilon = 1e-14);
        }
        // stationary barrier top
        let f = pot.force(&sys, &array![[0.0]]).unwrap();
        assert_eq!(f[[0, 0]], 0.0);
    }

    #[test]
    fn double_well_force_matches_fd() {
        let pot = Potential::double_well(1.7, 0.9, 1.0);
        let sys = dw_system();
        let mut rng = RngStream::new(10, 0);
        for _ in 0..100 {
            let pos = array![[rng.normal() * 1.5]];
            assert_force_matches_fd(&pot, &sys, &pos);
        }
    }

    #[test]
    fn mueller_brown_force_matches_fd() {
        let pot = Potential::mueller_brown(0.05, 1.0);
        let sys = SystemSpec::point_system("mb", 1, 2);
        let mut rng = RngStream::new(11, 0);
        for _ in 0..100 {
            let pos = array![[rng.uniform_range(-1.8, 1.2), rng.uniform_range(-0.5, 2.2)]];
            assert_force_matches_fd(&pot, &sys, &pos);
        }
    }

    #[test]
    fn mueller_brown_minima_within_one_order_of_magnitude() {
        // the three local minima of the conventional surface
        let pot = Potential::mueller_brown(0.05, 1.0);
        let sys = SystemSpec::point_system("mb", 1, 2);
        let minima = [
            array![[-0.5582, 1.4417]],
            array![[0.6235, 0.0280]],
            array![[-0.0500, 0.4667]],
        ];
        let us: Vec<f64> = minima.iter().map(|m| pot.energy(&sys, m).unwrap()).collect();
        let lo = us.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = us.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 10.0, "minima spread {lo}..{hi} too large at T=1");
    }

    #[test]
    fn two_bead_bond_at_rest_length_is_zero() {
        let sys = SystemSpec::bead_chain("b2", &[0, 0], 3, 1.0, &[1.0], 0.0, 0.0, 0.0, 0.0).unwrap();
        let pot = Potential::bead_chain(1.0);
        let pos = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_abs_diff_eq!(pot.energy(&sys, &pos).unwrap(), 0.0, epsilon = 1e-14);
        let f = pot.force(&sys, &pos).unwrap();
        for v in f.iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn bead_chain_energy_matches_naive_loop_oracle() {
        let sys = SystemSpec::bead_chain(
            "b5",
            &[0, 1, 2, 1, 0],
            3,
            35.0,
            &[1.0, 1.1, 0.95, 1.05],
            8.0,
            1.9,
            1.2,
            0.4,
        )
        .unwrap();
        let pot = Potential::bead_chain(1.0);
        let mut rng = RngStream::new(12, 0);
        // spread a loose chain so no nonbonded pair is near-coincident
        let mut pos = Array2::zeros((5, 3));
        for i in 0..5 {
            pos[[i, 0]] = i as f64 * 0.9 + 0.2 * rng.normal();
            pos[[i, 1]] = 0.3 * rng.normal();
            pos[[i, 2]] = 0.3 * rng.normal();
        }
        let u = pot.energy(&sys, &pos).unwrap();

        // term-by-term recomputation with naive loops
        let dist = |a: usize, b: usize| -> f64 {
            (0..3).map(|c| (pos[[a, c]] - pos[[b, c]]).powi(2)).sum::<f64>().sqrt()
        };
        let mut oracle = 0.0;
        for b in &sys.bonds {
            oracle += b.k_b * (dist(b.i, b.j) - b.r0).powi(2);
        }
        for a in &sys.angles {
            let u1: Vec<f64> = (0..3).map(|c| pos[[a.i, c]] - pos[[a.j, c]]).collect();
            let v1: Vec<f64> = (0..3).map(|c| pos[[a.k, c]] - pos[[a.j, c]]).collect();
            let dot: f64 = u1.iter().zip(&v1).map(|(x, y)| x * y).sum();
            let nu = u1.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v1.iter().map(|x| x * x).sum::<f64>().sqrt();
            let theta = (dot / (nu * nv)).clamp(-1.0, 1.0).acos();
            oracle += a.k_a * (theta - a.theta0).powi(2);
        }
        for d in &sys.dihedrals {
            let phi = beadchain::dihedral_angle(&pos, d.i, d.j, d.k, d.l);
            oracle += d.k_d * (1.0 + (d.n as f64 * phi - d.phi0).cos());
        }
        for (i, j) in sys.nonbonded_pairs() {
            let r = dist(i, j);
            if r < 3.0 * sys.nonbonded_sigma {
                oracle += (sys.nonbonded_sigma / r).powi(12);
            }
        }
        assert_abs_diff_eq!(u, oracle, epsilon = 1e-12);
    }

    #[test]
    fn bead_chain_force_matches_fd_over_random_configs() {
        let sys = SystemSpec::bead_chain(
            "b4",
            &[0, 1, 1, 0],
            3,
            20.0,
            &[1.0, 1.0, 1.0],
            5.0,
            1.9,
            0.8,
            0.3,
        )
        .unwrap();
        let pot = Potential::bead_chain(1.0);
        let mut rng = RngStream::new(13, 0);
        for _ in 0..100 {
            let mut pos = Array2::zeros((4, 3));
            for i in 0..4 {
                pos[[i, 0]] = i as f64 + 0.25 * rng.normal();
                pos[[i, 1]] = 0.5 * rng.normal();
                pos[[i, 2]] = 0.5 * rng.normal();
            }
            assert_force_matches_fd(&pot, &sys, &pos);
        }
    }

    #[test]
    fn bead_chain_invariant_under_rigid_motion_and_symmetry_permutation() {
        let sys = Arc::new(
            SystemSpec::bead_chain("sym2", &[3, 3], 3, 12.0, &[1.0], 0.0, 0.0, 0.0, 0.0).unwrap(),
        );
        let pot = Potential::bead_chain(1.0);
        let mut rng = RngStream::new(14, 0);
        let pos = rng.normal_matrix(2, 3);
        let u0 = pot.energy(&sys, &pos).unwrap();

        let rot = random_rotation(3, &mut rng);
        let shift = Array1::from_shape_fn(3, |_| rng.normal());
        let moved = apply_rigid_motion(&pos, &rot, &shift).unwrap();
        assert_abs_diff_eq!(pot.energy(&sys, &moved).unwrap(), u0, epsilon = 1e-9);

        // swapping the two identical beads maps the topology onto itself
        let state = State::from_positions(pos, sys.clone()).unwrap();
        let swapped = crate::core::apply_permutation(
            &state,
            &crate::core::Permutation::new(vec![1, 0]).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(
            pot.energy(&swapped.system, &swapped.positions).unwrap(),
            u0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn coincident_nonbonded_pair_is_an_error() {
        let sys = SystemSpec::bead_chain("b4c", &[0, 0, 0, 0], 3, 1.0, &[1.0, 1.0, 1.0], 1.0, 1.9, 0.0, 0.5).unwrap();
        let pot = Potential::bead_chain(1.0);
        let mut pos = Array2::zeros((4, 3));
        pos[[1, 0]] = 1.0;
        pos[[2, 0]] = 2.0;
        // atom 3 coincides with atom 0: (0, 3) is the only nonbonded pair
        match pot.energy(&sys, &pos) {
            Err(EnergyError::CoincidentAtoms { i: 0, j: 3, .. }) => {}
            other => panic!("expected coincident-pair error, got {other:?}"),
        }
    }

    #[test]
    fn kinetic_energy_examples() {
        assert_eq!(kinetic_energy(&Array2::zeros((3, 3)), &[1.0, 1.0, 1.0]), 0.0);
        assert_eq!(kinetic_energy(&array![[1.0, 0.0, 0.0]], &[2.0]), 1.0);
        // naive loop oracle
        let mut rng = RngStream::new(15, 0);
        let v = rng.normal_matrix(4, 2);
        let masses = [1.0, 2.0, 0.5, 3.0];
        let ke = kinetic_energy(&v, &masses);
        let mut oracle = 0.0;
        for i in 0..4 {
            for c in 0..2 {
                oracle += 0.5 * masses[i] * v[[i, c]] * v[[i, c]];
            }
        }
        assert_abs_diff_eq!(ke, oracle, epsilon = 1e-14);
    }

    #[test]
    fn log_mu_aug_matches_compositional_oracle() {
        let pot = Potential::double_well(1.5, 1.0, 0.7);
        let target = AugmentedTarget::new(pot.clone()).unwrap();
        let sys = Arc::new(dw_system());
        let mut rng = RngStream::new(16, 0);
        for _ in 0..50 {
            let state = State::new(
                rng.normal_matrix(1, 1),
                rng.normal_matrix(1, 1),
                sys.clone(),
            )
            .unwrap();
            let got = target.log_mu_aug(&state).unwrap();
            let u = pot.energy(&sys, &state.positions).unwrap();
            let v = state.auxiliaries[[0, 0]];
            let gauss = -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln();
            assert_abs_diff_eq!(got, -u / 0.7 + gauss, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_mu_aug_well_bottom_zero_aux() {
        let target = AugmentedTarget::new(Potential::double_well(2.0, 1.0, 1.0)).unwrap();
        let sys = Arc::new(dw_system());
        let state = State::new(array![[1.0]], array![[0.0]], sys).unwrap();
        let got = target.log_mu_aug(&state).unwrap();
        assert_abs_diff_eq!(got, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn doubling_temperature_halves_position_term() {
        let sys = Arc::new(dw_system());
        let state = State::new(array![[0.4]], array![[0.0]], sys.clone()).unwrap();
        let t1 = AugmentedTarget::new(Potential::double_well(2.0, 1.0, 1.0)).unwrap();
        let t2 = AugmentedTarget::new(Potential::double_well(2.0, 1.0, 2.0)).unwrap();
        let gauss = -0.5 * (2.0 * std::f64::consts::PI).ln();
        let p1 = t1.log_mu_aug(&state).unwrap() - gauss;
        let p2 = t2.log_mu_aug(&state).unwrap() - gauss;
        assert_abs_diff_eq!(p2, 0.5 * p1, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_auxiliary_factor_is_exact() {
        let target = AugmentedTarget::new(Potential::double_well(2.0, 1.0, 1.0)).unwrap();
        let sys = Arc::new(dw_system());
        let mut rng = RngStream::new(17, 0);
        for _ in 0..20 {
            let pos = rng.normal_matrix(1, 1);
            let aux = rng.normal_matrix(1, 1);
            let with_aux = State::new(pos.clone(), aux.clone(), sys.clone()).unwrap();
            let no_aux = State::new(pos, Array2::zeros((1, 1)), sys.clone()).unwrap();
            let diff =
                target.log_mu_aug(&with_aux).unwrap() - target.log_mu_aug(&no_aux).unwrap();
            let want = -0.5 * aux.iter().map(|v| v * v).sum::<f64>();
            assert_abs_diff_eq!(diff, want, epsilon = 1e-12);
        }
    }
}
