//! The conditional normalising flow: stacked affine coupling layers
//! whose scale/shift networks are atom transformers with multihead
//! kernel self-attention over the conditioning positions.
//!
//! The flow maps Gaussian latents `(z^p, z^v)` to a proposal
//! `(x^p, x^v)` conditioned on the current positions. Conditioning
//! enters only through the (centroid-subtracted) positions, never the
//! auxiliaries; the position output carries a skip connection so a
//! zeroed network proposes `x^p(t) + z^p`. Densities are exact via the
//! accumulated log-scales.

pub(crate) mod graph;

use crate::core::{center_of_geometry, RngStream, SystemSpec};
use crate::diffcore::{NodeId, ParamStore, Tape};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow config: {0}")]
    BadConfig(String),
    #[error("system dimension {system} does not match flow dimension {flow}")]
    DimensionMismatch { system: usize, flow: usize },
    #[error("atom type {ty} outside flow vocabulary {vocab}")]
    TypeOutOfVocab { ty: usize, vocab: usize },
    #[error("array shape {rows}x{cols} does not match system ({atoms} atoms, dimension {dim})")]
    Shape { rows: usize, cols: usize, atoms: usize, dim: usize },
    #[error("non-finite output in coupling layer {layer}")]
    NonFinite { layer: usize },
}

/// Architecture hyperparameters. `lengthscales` fixes both the head
/// count and the kernel widths (reduced units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub dimension: usize,
    pub n_coupling: usize,
    pub n_transformer: usize,
    pub d_model: usize,
    pub embed_dim: usize,
    pub lengthscales: Vec<f64>,
    pub phi_hidden: usize,
    pub mlp_hidden: usize,
    pub scale_clamp: f64,
    pub layer_norm: bool,
    pub type_vocab: usize,
}

impl FlowConfig {
    /// Desk-scale defaults.
    pub fn desk(dimension: usize) -> Self {
        FlowConfig {
            dimension,
            n_coupling: 4,
            n_transformer: 2,
            d_model: 32,
            embed_dim: 8,
            lengthscales: vec![0.1, 0.3, 0.7, 1.2],
            phi_hidden: 64,
            mlp_hidden: 64,
            scale_clamp: 5.0,
            layer_norm: false,
            type_vocab: 64,
        }
    }

    /// Smallest usable architecture; keeps full gradient checks cheap.
    pub fn tiny(dimension: usize) -> Self {
        FlowConfig {
            dimension,
            n_coupling: 1,
            n_transformer: 1,
            d_model: 3,
            embed_dim: 2,
            lengthscales: vec![0.5],
            phi_hidden: 3,
            mlp_hidden: 3,
            scale_clamp: 5.0,
            layer_norm: false,
            type_vocab: 4,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if !(1..=3).contains(&self.dimension) {
            return Err(FlowError::BadConfig(format!("dimension {} not in 1..=3", self.dimension)));
        }
        if self.n_coupling == 0 || self.d_model == 0 || self.embed_dim == 0 {
            return Err(FlowError::BadConfig("layer sizes must be positive".into()));
        }
        if self.lengthscales.is_empty() || self.lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(FlowError::BadConfig("lengthscales must be positive".into()));
        }
        if self.scale_clamp <= 0.0 {
            return Err(FlowError::BadConfig("scale_clamp must be positive".into()));
        }
        if self.type_vocab == 0 || self.type_vocab > crate::core::MAX_ATOM_TYPES {
            return Err(FlowError::BadConfig(format!(
                "type_vocab {} not in 1..={}",
                self.type_vocab,
                crate::core::MAX_ATOM_TYPES
            )));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        2 * self.dimension + self.embed_dim
    }
}

/// One sample from the flow together with the exact density it was
/// assigned by the generative pass.
#[derive(Debug, Clone)]
pub struct FlowProposal {
    pub positions: Array2<f64>,
    pub auxiliaries: Array2<f64>,
    pub log_density: f64,
}

/// The conditional flow: a config plus its parameter store.
#[derive(Debug, Clone)]
pub struct ConditionalFlow {
    pub config: FlowConfig,
    pub params: ParamStore,
}

impl ConditionalFlow {
    /// Identity-at-initialization flow: hidden layers random, every
    /// transformer's output layer zeroed. Exactly the identity proposal
    /// until trained, which also makes it the stable training start.
    pub fn identity(config: FlowConfig, seed: u64) -> Result<Self, FlowError> {
        Self::build(config, seed, 0.0)
    }

    /// Fully random flow. `output_scale` sets the typical magnitude of
    /// the transformer outputs (log-scales and shifts) independent of
    /// layer width; values around 0.1 give well-conditioned non-identity
    /// flows.
    pub fn random(config: FlowConfig, seed: u64, output_scale: f64) -> Result<Self, FlowError> {
        let normalized = output_scale / (config.phi_hidden as f64).sqrt();
        Self::build(config, seed, normalized)
    }

    fn build(config: FlowConfig, seed: u64, output_scale: f64) -> Result<Self, FlowError> {
        config.validate()?;
        let mut rng = RngStream::new(seed, 0xf10f);
        let mut params = ParamStore::new();
        let mut add = |name: String, rows: usize, cols: usize, scale: f64, rng: &mut RngStream| {
            let value = if scale == 0.0 {
                Array2::zeros((rows, cols))
            } else {
                let mut m = rng.normal_matrix(rows, cols);
                m.mapv_inplace(|v| v * scale);
                m
            };
            params.add(&name, value).expect("unique parameter names");
        };
        add("embed".into(), config.type_vocab, config.embed_dim, 0.5, &mut rng);
        let d = config.dimension;
        let in_dim = config.input_dim();
        for l in 0..config.n_coupling {
            for net in ["sp", "tp", "sv", "tv"] {
                let p = format!("c{l}.{net}");
                add(format!("{p}.in.w0"), in_dim, config.phi_hidden, (1.0 / in_dim as f64).sqrt(), &mut rng);
                add(format!("{p}.in.b0"), 1, config.phi_hidden, 0.0, &mut rng);
                add(format!("{p}.in.w1"), config.phi_hidden, config.d_model, (1.0 / config.phi_hidden as f64).sqrt(), &mut rng);
                add(format!("{p}.in.b1"), 1, config.d_model, 0.0, &mut rng);
                for k in 0..config.n_transformer {
                    let b = format!("{p}.blk{k}");
                    for h in 0..config.lengthscales.len() {
                        add(format!("{b}.attn.v{h}"), config.d_model, config.d_model, (1.0 / config.d_model as f64).sqrt(), &mut rng);
                    }
                    let mix_in = config.lengthscales.len() * config.d_model;
                    add(format!("{b}.attn.mix.w"), mix_in, config.d_model, (1.0 / mix_in as f64).sqrt(), &mut rng);
                    add(format!("{b}.attn.mix.b"), 1, config.d_model, 0.0, &mut rng);
                    add(format!("{b}.mlp.w0"), config.d_model, config.mlp_hidden, (1.0 / config.d_model as f64).sqrt(), &mut rng);
                    add(format!("{b}.mlp.b0"), 1, config.mlp_hidden, 0.0, &mut rng);
                    add(format!("{b}.mlp.w1"), config.mlp_hidden, config.d_model, (1.0 / config.mlp_hidden as f64).sqrt(), &mut rng);
                    add(format!("{b}.mlp.b1"), 1, config.d_model, 0.0, &mut rng);
                }
                add(format!("{p}.out.w0"), config.d_model, config.phi_hidden, (1.0 / config.d_model as f64).sqrt(), &mut rng);
                add(format!("{p}.out.b0"), 1, config.phi_hidden, 0.0, &mut rng);
                add(format!("{p}.out.w1"), config.phi_hidden, d, output_scale, &mut rng);
                add(format!("{p}.out.b1"), 1, d, 0.0, &mut rng);
            }
        }
        Ok(ConditionalFlow { config, params })
    }

    /// Rebuild a flow around a parameter store loaded from a checkpoint.
    pub fn from_params(config: FlowConfig, params: ParamStore) -> Result<Self, FlowError> {
        config.validate()?;
        let expect = Self::identity(config.clone(), 0)?;
        let want: Vec<&str> = expect.params.names().collect();
        let have: Vec<&str> = params.names().collect();
        if want != have {
            return Err(FlowError::BadConfig(
                "checkpoint parameter names do not match flow architecture".into(),
            ));
        }
        Ok(ConditionalFlow { config, params })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    fn check_system(&self, system: &SystemSpec) -> Result<(), FlowError> {
        if system.dimension != self.config.dimension {
            return Err(FlowError::DimensionMismatch {
                system: system.dimension,
                flow: self.config.dimension,
            });
        }
        if let Some(&ty) = system.atom_types.iter().find(|&&t| t >= self.config.type_vocab) {
            return Err(FlowError::TypeOutOfVocab { ty, vocab: self.config.type_vocab });
        }
        Ok(())
    }

    fn check_shape(&self, system: &SystemSpec, arr: &Array2<f64>) -> Result<(), FlowError> {
        if arr.dim() != (system.n_atoms, system.dimension) {
            return Err(FlowError::Shape {
                rows: arr.nrows(),
                cols: arr.ncols(),
                atoms: system.n_atoms,
                dim: system.dimension,
            });
        }
        Ok(())
    }

    /// Open a sampling session (parameters bound once; each call rebuilds
    /// only the data-dependent part of the graph).
    pub fn session(&self) -> FlowSession<'_> {
        let mut tape = Tape::new();
        let bound = graph::bind_params(&mut tape, &self.params, &self.config);
        let base_len = tape.len();
        FlowSession { flow: self, tape, bound, base_len }
    }

    /// Draw `batch` proposals conditioned on `cond_positions`, each with
    /// its exact log-density.
    pub fn sample(
        &self,
        system: &SystemSpec,
        cond_positions: &Array2<f64>,
        rng: &mut RngStream,
        batch: usize,
    ) -> Result<Vec<FlowProposal>, FlowError> {
        self.session().sample(system, cond_positions, rng, batch)
    }

    /// Exact conditional log-density of a proposal state.
    pub fn log_density(
        &self,
        system: &SystemSpec,
        positions: &Array2<f64>,
        auxiliaries: &Array2<f64>,
        cond_positions: &Array2<f64>,
    ) -> Result<f64, FlowError> {
        self.session().log_density(system, positions, auxiliaries, cond_positions)
    }

    /// Forward map of a single coupling layer on raw arrays (canonical
    /// frame). Returns the transformed latents and the layer's log-det.
    pub fn coupling_forward(
        &self,
        layer: usize,
        system: &SystemSpec,
        z_pos: &Array2<f64>,
        z_aux: &Array2<f64>,
        cond_canonical: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, f64), FlowError> {
        self.coupling_apply(layer, system, z_pos, z_aux, cond_canonical, false)
    }

    /// Inverse map of a single coupling layer on raw arrays.
    pub fn coupling_inverse(
        &self,
        layer: usize,
        system: &SystemSpec,
        z_pos_next: &Array2<f64>,
        z_aux_next: &Array2<f64>,
        cond_canonical: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, f64), FlowError> {
        self.coupling_apply(layer, system, z_pos_next, z_aux_next, cond_canonical, true)
    }

    fn coupling_apply(
        &self,
        layer: usize,
        system: &SystemSpec,
        a: &Array2<f64>,
        b: &Array2<f64>,
        cond: &Array2<f64>,
        inverse: bool,
    ) -> Result<(Array2<f64>, Array2<f64>, f64), FlowError> {
        self.check_system(system)?;
        for arr in [a, b, cond] {
            self.check_shape(system, arr)?;
        }
        let mut tape = Tape::new();
        let bound = graph::bind_params(&mut tape, &self.params, &self.config);
        let cond_node = tape.constant(cond.clone());
        let attention = graph::attention_weight_nodes(&mut tape, cond_node, &self.config.lengthscales);
        let embed_rows = tape.gather_rows(bound.embed, &system.atom_types);
        let an = tape.constant(a.clone());
        let bn = tape.constant(b.clone());
        let (p, v, ld) = if inverse {
            graph::coupling_inverse(
                &mut tape,
                &bound.couplings[layer],
                &self.config,
                cond_node,
                embed_rows,
                &attention,
                an,
                bn,
            )
        } else {
            graph::coupling_forward(
                &mut tape,
                &bound.couplings[layer],
                &self.config,
                cond_node,
                embed_rows,
                &attention,
                an,
                bn,
            )
        };
        Ok((tape.value(p).clone(), tape.value(v).clone(), tape.scalar(ld)))
    }
}

/// A bound sampling/density session over one flow.
pub struct FlowSession<'a> {
    flow: &'a ConditionalFlow,
    tape: Tape,
    bound: graph::BoundParams,
    base_len: usize,
}

impl FlowSession<'_> {
    pub fn config(&self) -> &FlowConfig {
        &self.flow.config
    }

    /// Total elements clamped in scale networks since the session opened.
    pub fn clamp_events(&self) -> u64 {
        self.tape.clamp_events()
    }

    /// Draw `batch` proposals conditioned on `cond_positions`.
    pub fn sample(
        &mut self,
        system: &SystemSpec,
        cond_positions: &Array2<f64>,
        rng: &mut RngStream,
        batch: usize,
    ) -> Result<Vec<FlowProposal>, FlowError> {
        self.flow.check_system(system)?;
        self.flow.check_shape(system, cond_positions)?;
        let n = system.n_atoms;
        let d = system.dimension;
        let center = center_of_geometry(cond_positions).expect("n_atoms >= 1");
        let mut cond_c = cond_positions.clone();
        for mut row in cond_c.rows_mut() {
            row -= &center;
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let z_pos = rng.normal_matrix(n, d);
            let z_aux = rng.normal_matrix(n, d);
            out.push(self.generate(system, &cond_c, &center, z_pos, z_aux)?);
        }
        Ok(out)
    }

    /// Push explicit latents through the generative pass (canonicalizes
    /// the conditioning internally). This is the reparameterized path the
    /// acceptance and entropy objectives differentiate through.
    pub fn sample_with_latents(
        &mut self,
        system: &SystemSpec,
        cond_positions: &Array2<f64>,
        z_pos: Array2<f64>,
        z_aux: Array2<f64>,
    ) -> Result<FlowProposal, FlowError> {
        self.flow.check_system(system)?;
        self.flow.check_shape(system, cond_positions)?;
        let center = center_of_geometry(cond_positions).expect("n_atoms >= 1");
        let mut cond_c = cond_positions.clone();
        for mut row in cond_c.rows_mut() {
            row -= &center;
        }
        self.generate(system, &cond_c, &center, z_pos, z_aux)
    }

    fn generate(
        &mut self,
        system: &SystemSpec,
        cond_c: &Array2<f64>,
        center: &ndarray::Array1<f64>,
        z_pos: Array2<f64>,
        z_aux: Array2<f64>,
    ) -> Result<FlowProposal, FlowError> {
        self.tape.truncate(self.base_len);
        let tape = &mut self.tape;
        let cond_node = tape.constant(cond_c.clone());
        let zp = tape.constant(z_pos);
        let zv = tape.constant(z_aux);
        let base_p = graph::gaussian_log_density_node(tape, zp);
        let base_v = graph::gaussian_log_density_node(tape, zv);
        let (out_pos, out_aux, log_det) = graph::forward_pass(
            tape,
            &self.bound,
            &self.flow.config,
            &system.atom_types,
            cond_node,
            zp,
            zv,
        );
        let mut positions = tape.value(out_pos).clone();
        let auxiliaries = tape.value(out_aux).clone();
        for (layer, arr) in [&positions, &auxiliaries].into_iter().enumerate() {
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(FlowError::NonFinite { layer });
            }
        }
        for mut row in positions.rows_mut() {
            row += center;
        }
        let log_density = tape.scalar(base_p) + tape.scalar(base_v) - tape.scalar(log_det);
        Ok(FlowProposal { positions, auxiliaries, log_density })
    }

    /// Recover the latents that generate `(positions, auxiliaries)` under
    /// this conditioning, along with the inverse log-det.
    pub fn invert(
        &mut self,
        system: &SystemSpec,
        positions: &Array2<f64>,
        auxiliaries: &Array2<f64>,
        cond_positions: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, f64), FlowError> {
        self.flow.check_system(system)?;
        for arr in [positions, auxiliaries, cond_positions] {
            self.flow.check_shape(system, arr)?;
        }
        let center = center_of_geometry(cond_positions).expect("n_atoms >= 1");
        let mut cond_c = cond_positions.clone();
        let mut pos_c = positions.clone();
        for mut row in cond_c.rows_mut() {
            row -= &center;
        }
        for mut row in pos_c.rows_mut() {
            row -= &center;
        }
        self.tape.truncate(self.base_len);
        let tape = &mut self.tape;
        let cond_node = tape.constant(cond_c);
        let pos_node = tape.constant(pos_c);
        let aux_node = tape.constant(auxiliaries.clone());
        let (zp, zv, log_det_inv) = graph::inverse_pass(
            tape,
            &self.bound,
            &self.flow.config,
            &system.atom_types,
            cond_node,
            pos_node,
            aux_node,
        );
        Ok((
            tape.value(zp).clone(),
            tape.value(zv).clone(),
            tape.scalar(log_det_inv),
        ))
    }

    /// Exact conditional log-density of `(positions, auxiliaries)` given
    /// the conditioning positions.
    pub fn log_density(
        &mut self,
        system: &SystemSpec,
        positions: &Array2<f64>,
        auxiliaries: &Array2<f64>,
        cond_positions: &Array2<f64>,
    ) -> Result<f64, FlowError> {
        self.flow.check_system(system)?;
        for arr in [positions, auxiliaries, cond_positions] {
            self.flow.check_shape(system, arr)?;
        }
        let center = center_of_geometry(cond_positions).expect("n_atoms >= 1");
        let mut cond_c = cond_positions.clone();
        let mut pos_c = positions.clone();
        for mut row in cond_c.rows_mut() {
            row -= &center;
        }
        for mut row in pos_c.rows_mut() {
            row -= &center;
        }
        self.tape.truncate(self.base_len);
        let tape = &mut self.tape;
        let cond_node = tape.constant(cond_c);
        let pos_node = tape.constant(pos_c);
        let aux_node = tape.constant(auxiliaries.clone());
        let (zp, zv, log_det_inv) = graph::inverse_pass(
            tape,
            &self.bound,
            &self.flow.config,
            &system.atom_types,
            cond_node,
            pos_node,
            aux_node,
        );
        for (layer, node) in [zp, zv].into_iter().enumerate() {
            if tape.value(node).iter().any(|v| !v.is_finite()) {
                return Err(FlowError::NonFinite { layer });
            }
        }
        let base_p = graph::gaussian_log_density_node(tape, zp);
        let base_v = graph::gaussian_log_density_node(tape, zv);
        Ok(tape.scalar(base_p) + tape.scalar(base_v) + tape.scalar(log_det_inv))
    }
}

/// Row-stochastic kernel attention weights
/// `w_ij = softmax_j(-|x_i - x_j|^2 / l^2)` computed directly on arrays
/// (the tape-free reference used by samplers and tests).
pub fn attention_weights(positions: &Array2<f64>, lengthscale: f64) -> Array2<f64> {
    assert!(lengthscale > 0.0, "attention_weights: lengthscale must be positive");
    let n = positions.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            let mut d2 = 0.0;
            for c in 0..positions.ncols() {
                let diff = positions[[i, c]] - positions[[j, c]];
                d2 += diff * diff;
            }
            let v = -d2 / (lengthscale * lengthscale);
            out[[i, j]] = v;
            max = max.max(v);
        }
        let mut sum = 0.0;
        for j in 0..n {
            out[[i, j]] = (out[[i, j]] - max).exp();
            sum += out[[i, j]];
        }
        for j in 0..n {
            out[[i, j]] /= sum;
        }
    }
    out
}
