use super::{CoreError, SystemSpec};
use ndarray::Array2;
use std::sync::Arc;

/// One configuration of a system: positions plus the non-physical
/// auxiliary channel that stands in for velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub positions: Array2<f64>,
    pub auxiliaries: Array2<f64>,
    pub system: Arc<SystemSpec>,
}

impl State {
    pub fn new(
        positions: Array2<f64>,
        auxiliaries: Array2<f64>,
        system: Arc<SystemSpec>,
    ) -> Result<Self, CoreError> {
        let want = (system.n_atoms, system.dimension);
        for (label, arr) in [("positions", &positions), ("auxiliaries", &auxiliaries)] {
            if arr.dim() != want {
                return Err(CoreError::ShapeMismatch {
                    rows: arr.nrows(),
                    cols: arr.ncols(),
                    atoms: system.n_atoms,
                    dim: system.dimension,
                });
            }
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite {
                    what: if label == "positions" { "positions" } else { "auxiliaries" },
                });
            }
        }
        Ok(State {
            positions,
            auxiliaries,
            system,
        })
    }

    /// Positions with a zero auxiliary channel.
    pub fn from_positions(positions: Array2<f64>, system: Arc<SystemSpec>) -> Result<Self, CoreError> {
        let aux = Array2::zeros(positions.dim());
        State::new(positions, aux, system)
    }
}

/// A permutation of atom indices, validated as a bijection on 0..N.
/// `perm[i]` is the destination row of input row `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self, CoreError> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &to in &map {
            if to >= n || seen[to] {
                return Err(CoreError::NotAPermutation { len: n });
            }
            seen[to] = true;
        }
        Ok(Permutation(map))
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn random(n: usize, rng: &mut super::RngStream) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        // Fisher-Yates on the deterministic stream
        for i in (1..n).rev() {
            let j = rng.below(i + 1);
            map.swap(i, j);
        }
        Permutation(map)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn map(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (from, &to) in self.0.iter().enumerate() {
            inv[to] = from;
        }
        Permutation(inv)
    }

    /// Apply to the rows of a matrix: output row `perm[i]` is input row `i`.
    pub fn apply_rows(&self, arr: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(arr.dim());
        for (from, &to) in self.0.iter().enumerate() {
            out.row_mut(to).assign(&arr.row(from));
        }
        out
    }

    pub fn apply_indices(&self, xs: &[usize]) -> Vec<usize> {
        let mut out = vec![0; xs.len()];
        for (from, &to) in self.0.iter().enumerate() {
            out[to] = xs[from];
        }
        out
    }
}

/// Permute the atoms of a state (positions, auxiliaries, and the system's
/// atom types move together).
pub fn apply_permutation(state: &State, perm: &Permutation) -> Result<State, CoreError> {
    if perm.len() != state.system.n_atoms {
        return Err(CoreError::PermutationLength {
            perm: perm.len(),
            atoms: state.system.n_atoms,
        });
    }
    let mut system = (*state.system).clone();
    system.atom_types = perm.apply_indices(&system.atom_types);
    system.masses = {
        let as_idx: Vec<f64> = system.masses.clone();
        let mut out = vec![0.0; as_idx.len()];
        for (from, &to) in perm.map().iter().enumerate() {
            out[to] = as_idx[from];
        }
        out
    };
    // bonded terms keep pointing at the same atoms under their new labels
    for b in &mut system.bonds {
        b.i = perm.map()[b.i];
        b.j = perm.map()[b.j];
    }
    for a in &mut system.angles {
        a.i = perm.map()[a.i];
        a.j = perm.map()[a.j];
        a.k = perm.map()[a.k];
    }
    for d in &mut system.dihedrals {
        d.i = perm.map()[d.i];
        d.j = perm.map()[d.j];
        d.k = perm.map()[d.k];
        d.l = perm.map()[d.l];
    }
    State::new(
        perm.apply_rows(&state.positions),
        perm.apply_rows(&state.auxiliaries),
        Arc::new(system),
    )
}
