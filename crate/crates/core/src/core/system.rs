use super::{CoreError, RngStream};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

/// Version stamp written into serialized system specs.
pub const SPEC_FORMAT_VERSION: u32 = 1;

/// Largest atom-type id accepted by the embedding table.
pub const MAX_ATOM_TYPES: usize = 64;

/// Harmonic bond between atoms `i` and `j`: `k_b * (|r_ij| - r0)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BondTerm {
    pub i: usize,
    pub j: usize,
    pub k_b: f64,
    pub r0: f64,
}

/// Harmonic angle at atom `j`: `k_a * (theta - theta0)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleTerm {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub k_a: f64,
    pub theta0: f64,
}

/// Cosine dihedral over atoms `i-j-k-l`: `k_d * (1 + cos(n*phi - phi0))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DihedralTerm {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub l: usize,
    pub k_d: f64,
    pub n: u32,
    pub phi0: f64,
}

/// Topology and parameters of one surrogate system. This is the unit the
/// flow transfers across: atom types feed the learned embeddings, the
/// bonded terms define the bead-chain potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub format_version: u32,
    pub name: String,
    pub n_atoms: usize,
    pub atom_types: Vec<usize>,
    pub masses: Vec<f64>,
    #[serde(default)]
    pub bonds: Vec<BondTerm>,
    #[serde(default)]
    pub angles: Vec<AngleTerm>,
    #[serde(default)]
    pub dihedrals: Vec<DihedralTerm>,
    pub nonbonded_sigma: f64,
    pub dimension: usize,
}

impl SystemSpec {
    /// A system with no bonded terms, used by the double-well and
    /// Mueller-Brown potentials which define their own energy surface.
    pub fn point_system(name: &str, n_atoms: usize, dimension: usize) -> Self {
        SystemSpec {
            format_version: SPEC_FORMAT_VERSION,
            name: name.to_string(),
            n_atoms,
            atom_types: vec![0; n_atoms],
            masses: vec![1.0; n_atoms],
            bonds: Vec::new(),
            angles: Vec::new(),
            dihedrals: Vec::new(),
            nonbonded_sigma: 0.0,
            dimension,
        }
    }

    /// Linear bead chain with harmonic bonds/angles and one cosine dihedral
    /// per consecutive quadruple (only when `dimension == 3`).
    pub fn bead_chain(
        name: &str,
        atom_types: &[usize],
        dimension: usize,
        bond_stiffness: f64,
        bond_lengths: &[f64],
        angle_stiffness: f64,
        angle_rest: f64,
        dihedral_stiffness: f64,
        nonbonded_sigma: f64,
    ) -> Result<Self, CoreError> {
        let n = atom_types.len();
        let bonds = (0..n.saturating_sub(1))
            .map(|i| BondTerm {
                i,
                j: i + 1,
                k_b: bond_stiffness,
                r0: bond_lengths[i],
            })
            .collect();
        let angles = if dimension >= 2 && n >= 3 {
            (0..n - 2)
                .map(|i| AngleTerm {
                    i,
                    j: i + 1,
                    k: i + 2,
                    k_a: angle_stiffness,
                    theta0: angle_rest,
                })
                .collect()
        } else {
            Vec::new()
        };
        let dihedrals = if dimension == 3 && n >= 4 && dihedral_stiffness > 0.0 {
            (0..n - 3)
                .map(|i| DihedralTerm {
                    i,
                    j: i + 1,
                    k: i + 2,
                    l: i + 3,
                    k_d: dihedral_stiffness,
                    n: 2,
                    phi0: 0.0,
                })
                .collect()
        } else {
            Vec::new()
        };
        let spec = SystemSpec {
            format_version: SPEC_FORMAT_VERSION,
            name: name.to_string(),
            n_atoms: n,
            atom_types: atom_types.to_vec(),
            masses: vec![1.0; n],
            bonds,
            angles,
            dihedrals,
            nonbonded_sigma,
            dimension,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let fail = |reason: String| CoreError::InvalidSystem {
            system: self.name.clone(),
            reason,
        };
        if !(1..=3).contains(&self.dimension) {
            return Err(fail(format!("dimension must be 1, 2, or 3, got {}", self.dimension)));
        }
        if self.n_atoms == 0 {
            return Err(fail("system must contain at least one atom".into()));
        }
        if self.atom_types.len() != self.n_atoms || self.masses.len() != self.n_atoms {
            return Err(fail("atom_types/masses length must equal n_atoms".into()));
        }
        if let Some(&t) = self.atom_types.iter().find(|&&t| t >= MAX_ATOM_TYPES) {
            return Err(fail(format!("atom type id {t} exceeds vocabulary size {MAX_ATOM_TYPES}")));
        }
        if self.masses.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(fail("masses must be positive and finite".into()));
        }
        if self.nonbonded_sigma < 0.0 {
            return Err(fail("nonbonded_sigma must be non-negative".into()));
        }
        let mut seen = HashSet::new();
        for b in &self.bonds {
            if b.i >= self.n_atoms || b.j >= self.n_atoms || b.i == b.j {
                return Err(fail(format!("bond ({}, {}) out of range", b.i, b.j)));
            }
            if b.k_b < 0.0 {
                return Err(fail(format!("bond ({}, {}) has negative force constant", b.i, b.j)));
            }
            let key = (b.i.min(b.j), b.i.max(b.j));
            if !seen.insert(key) {
                return Err(fail(format!("duplicate bond ({}, {})", key.0, key.1)));
            }
        }
        for a in &self.angles {
            if a.i >= self.n_atoms || a.j >= self.n_atoms || a.k >= self.n_atoms {
                return Err(fail(format!("angle ({}, {}, {}) out of range", a.i, a.j, a.k)));
            }
            if a.k_a < 0.0 {
                return Err(fail("negative angle force constant".into()));
            }
            if self.dimension < 2 {
                return Err(fail("angle terms require dimension >= 2".into()));
            }
        }
        for d in &self.dihedrals {
            if [d.i, d.j, d.k, d.l].iter().any(|&x| x >= self.n_atoms) {
                return Err(fail(format!(
                    "dihedral ({}, {}, {}, {}) out of range",
                    d.i, d.j, d.k, d.l
                )));
            }
            if d.k_d < 0.0 {
                return Err(fail("negative dihedral force constant".into()));
            }
            if self.dimension != 3 {
                return Err(fail("dihedral terms require dimension 3".into()));
            }
        }
        Ok(())
    }

    /// Pairs subject to the repulsive nonbonded term: every pair that does
    /// not share a bond or sit at the ends of a common angle (1-2 and 1-3
    /// exclusions; 1-4 pairs interact).
    pub fn nonbonded_pairs(&self) -> Vec<(usize, usize)> {
        let mut excluded: HashSet<(usize, usize)> = HashSet::new();
        for b in &self.bonds {
            excluded.insert((b.i.min(b.j), b.i.max(b.j)));
        }
        for a in &self.angles {
            excluded.insert((a.i.min(a.k), a.i.max(a.k)));
        }
        let mut pairs = Vec::new();
        for i in 0..self.n_atoms {
            for j in (i + 1)..self.n_atoms {
                if !excluded.contains(&(i, j)) {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("system spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, CoreError> {
        let spec: SystemSpec =
            toml::from_str(text).map_err(|e| CoreError::SpecRead(e.to_string()))?;
        if spec.format_version != SPEC_FORMAT_VERSION {
            return Err(CoreError::SpecRead(format!(
                "unsupported format_version {} (expected {})",
                spec.format_version, SPEC_FORMAT_VERSION
            )));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        std::fs::write(path, self.to_toml()).map_err(|e| CoreError::SpecRead(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::SpecRead(e.to_string()))?;
        Self::from_toml(&text)
    }
}

/// Configuration for generating a family of related bead chains that share
/// an atom-type vocabulary but differ in type sequence and stiffness.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub n_systems: usize,
    pub n_atoms: usize,
    pub dimension: usize,
    pub type_vocab: usize,
    pub bond_stiffness: f64,
    pub base_bond_length: f64,
    pub angle_stiffness: f64,
    pub angle_rest: f64,
    /// Dihedral stiffness sampled log-uniformly from this range per system
    /// (`dimension == 3` only; ignored otherwise).
    pub dihedral_stiffness: (f64, f64),
    pub nonbonded_sigma: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            n_systems: 10,
            n_atoms: 4,
            dimension: 3,
            type_vocab: 4,
            bond_stiffness: 50.0,
            base_bond_length: 1.0,
            angle_stiffness: 10.0,
            angle_rest: 1.9,
            dihedral_stiffness: (0.5, 1.5),
            nonbonded_sigma: 0.3,
        }
    }
}

/// Generate a family of bead chains: random type sequences over a shared
/// vocabulary, bond rest lengths derived from the endpoint types, and
/// per-system dihedral stiffness. Deterministic given the stream.
pub fn bead_chain_family(
    cfg: &FamilyConfig,
    rng: &mut RngStream,
) -> Result<Vec<SystemSpec>, CoreError> {
    let mut systems = Vec::with_capacity(cfg.n_systems);
    let mut used_names: HashSet<String> = HashSet::new();
    while systems.len() < cfg.n_systems {
        let types: Vec<usize> = (0..cfg.n_atoms).map(|_| rng.below(cfg.type_vocab)).collect();
        let type_tag: String = types.iter().map(|t| format!("{t:x}")).collect();
        let name = format!("chain{}d{}-{}", cfg.n_atoms, cfg.dimension, type_tag);
        if !used_names.insert(name.clone()) {
            continue; // resample duplicate sequences
        }
        let denom = 2.0 * (cfg.type_vocab.max(2) - 1) as f64;
        let bond_lengths: Vec<f64> = (0..cfg.n_atoms - 1)
            .map(|i| cfg.base_bond_length * (1.0 + 0.1 * (types[i] + types[i + 1]) as f64 / denom))
            .collect();
        let (lo, hi) = cfg.dihedral_stiffness;
        let k_d = if cfg.dimension == 3 {
            (lo.ln() + (hi.ln() - lo.ln()) * rng.uniform()).exp()
        } else {
            0.0
        };
        systems.push(SystemSpec::bead_chain(
            &name,
            &types,
            cfg.dimension,
            cfg.bond_stiffness,
            &bond_lengths,
            cfg.angle_stiffness,
            cfg.angle_rest,
            k_d,
            cfg.nonbonded_sigma,
        )?);
    }
    Ok(systems)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_chain() -> SystemSpec {
        SystemSpec::bead_chain(
            "t",
            &[0, 1, 2, 3],
            3,
            50.0,
            &[1.0, 1.05, 1.1],
            10.0,
            1.9,
            1.0,
            0.3,
        )
        .unwrap()
    }

    #[test]
    fn toml_round_trip_preserves_spec() {
        let spec = small_chain();
        let text = spec.to_toml();
        let back = SystemSpec::from_toml(&text).unwrap();
        assert_eq!(spec, back);
        // exact field names are part of the format contract
        for key in [
            "format_version",
            "name",
            "n_atoms",
            "atom_types",
            "masses",
            "nonbonded_sigma",
            "dimension",
        ] {
            assert!(text.contains(key), "missing key {key} in:\n{text}");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = small_chain().to_toml();
        text.push_str("\nbogus_key = 3\n");
        assert!(SystemSpec::from_toml(&text).is_err());
    }

    #[test]
    fn duplicate_bond_rejected() {
        let mut spec = small_chain();
        spec.bonds.push(BondTerm {
            i: 1,
            j: 0,
            k_b: 1.0,
            r0: 1.0,
        });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn out_of_range_index_rejected() {
        let mut spec = small_chain();
        spec.bonds[0].j = 99;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn dihedrals_require_three_dimensions() {
        let mut spec = small_chain();
        spec.dimension = 2;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn nonbonded_excludes_bonded_and_angle_pairs() {
        let spec = small_chain();
        // chain 0-1-2-3: excluded 01,12,23 (bonds) and 02,13 (angles)
        assert_eq!(spec.nonbonded_pairs(), vec![(0, 3)]);
    }

    #[test]
    fn family_is_deterministic_and_distinct() {
        let cfg = FamilyConfig::default();
        let a = bead_chain_family(&cfg, &mut RngStream::new(5, 0)).unwrap();
        let b = bead_chain_family(&cfg, &mut RngStream::new(5, 0)).unwrap();
        assert_eq!(a, b);
        let names: HashSet<_> = a.iter().map(|s| s.name.clone()).collect();
        assert_eq!(names.len(), cfg.n_systems);
    }
}
