//! Tape-graph construction for the conditional flow: kernel attention,
//! atom transformers, and the coupling-layer forward/inverse passes.
//! Everything here is differentiable, including the attention weights'
//! dependence on the conditioning positions, so acceptance-style
//! objectives can differentiate through a conditioning state that is
//! itself model output.

use super::FlowConfig;
use crate::diffcore::{NodeId, ParamStore, Tape};

/// Node ids of one bound scale/translation network.
pub(super) struct BoundTransformer {
    pub in_w0: NodeId,
    pub in_b0: NodeId,
    pub in_w1: NodeId,
    pub in_b1: NodeId,
    pub blocks: Vec<BoundBlock>,
    pub out_w0: NodeId,
    pub out_b0: NodeId,
    pub out_w1: NodeId,
    pub out_b1: NodeId,
}

pub(super) struct BoundBlock {
    pub attn_values: Vec<NodeId>,
    pub mix_w: NodeId,
    pub mix_b: NodeId,
    pub mlp_w0: NodeId,
    pub mlp_b0: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
}

pub(super) struct BoundCoupling {
    pub scale_pos: BoundTransformer,
    pub shift_pos: BoundTransformer,
    pub scale_aux: BoundTransformer,
    pub shift_aux: BoundTransformer,
}

/// All flow parameters inserted into a tape.
pub(super) struct BoundParams {
    pub embed: NodeId,
    pub couplings: Vec<BoundCoupling>,
}

pub(super) fn bind_params(tape: &mut Tape, store: &ParamStore, cfg: &FlowConfig) -> BoundParams {
    let bind_transformer = |tape: &mut Tape, prefix: &str| -> BoundTransformer {
        BoundTransformer {
            in_w0: tape.param(&format!("{prefix}.in.w0"), store),
            in_b0: tape.param(&format!("{prefix}.in.b0"), store),
            in_w1: tape.param(&format!("{prefix}.in.w1"), store),
            in_b1: tape.param(&format!("{prefix}.in.b1"), store),
            blocks: (0..cfg.n_transformer)
                .map(|k| BoundBlock {
                    attn_values: (0..cfg.lengthscales.len())
                        .map(|h| tape.param(&format!("{prefix}.blk{k}.attn.v{h}"), store))
                        .collect(),
                    mix_w: tape.param(&format!("{prefix}.blk{k}.attn.mix.w"), store),
                    mix_b: tape.param(&format!("{prefix}.blk{k}.attn.mix.b"), store),
                    mlp_w0: tape.param(&format!("{prefix}.blk{k}.mlp.w0"), store),
                    mlp_b0: tape.param(&format!("{prefix}.blk{k}.mlp.b0"), store),
                    mlp_w1: tape.param(&format!("{prefix}.blk{k}.mlp.w1"), store),
                    mlp_b1: tape.param(&format!("{prefix}.blk{k}.mlp.b1"), store),
                })
                .collect(),
            out_w0: tape.param(&format!("{prefix}.out.w0"), store),
            out_b0: tape.param(&format!("{prefix}.out.b0"), store),
            out_w1: tape.param(&format!("{prefix}.out.w1"), store),
            out_b1: tape.param(&format!("{prefix}.out.b1"), store),
        }
    };
    BoundParams {
        embed: tape.param("embed", store),
        couplings: (0..cfg.n_coupling)
            .map(|l| BoundCoupling {
                scale_pos: bind_transformer(tape, &format!("c{l}.sp")),
                shift_pos: bind_transformer(tape, &format!("c{l}.tp")),
                scale_aux: bind_transformer(tape, &format!("c{l}.sv")),
                shift_aux: bind_transformer(tape, &format!("c{l}.tv")),
            })
            .collect(),
    }
}

/// Subtract the centroid of `reference` from `x` (rows broadcast).
pub(super) fn center_by(tape: &mut Tape, x: NodeId, reference: NodeId) -> NodeId {
    let n = tape.value(reference).nrows();
    let sums = tape.sum_rows(reference);
    let mean = tape.mul_scalar(sums, 1.0 / n as f64);
    let mean_rows = tape.broadcast_row(mean, tape.value(x).nrows());
    tape.sub(x, mean_rows)
}

/// Squared pairwise distances of the rows of `x` (NxN).
fn pairwise_sq_dists(tape: &mut Tape, x: NodeId) -> NodeId {
    let n = tape.value(x).nrows();
    let sq = tape.square(x);
    let row_norms = tape.sum_cols(sq); // Nx1
    let xt = tape.transpose(x);
    let gram = tape.matmul(x, xt);
    let minus_two_gram = tape.mul_scalar(gram, -2.0);
    let col = tape.broadcast_col(row_norms, n);
    let row_norms_t = tape.transpose(row_norms);
    let row = tape.broadcast_row(row_norms_t, n);
    let partial = tape.add(col, row);
    tape.add(partial, minus_two_gram)
}

/// Per-head attention weight matrices from the conditioning positions:
/// `softmax_j(-|x_i - x_j|^2 / l^2)`, one NxN row-stochastic matrix per
/// lengthscale. Latents never enter here.
pub(super) fn attention_weight_nodes(
    tape: &mut Tape,
    cond: NodeId,
    lengthscales: &[f64],
) -> Vec<NodeId> {
    let d2 = pairwise_sq_dists(tape, cond);
    lengthscales
        .iter()
        .map(|&l| {
            let scaled = tape.mul_scalar(d2, -1.0 / (l * l));
            tape.softmax_rows(scaled)
        })
        .collect()
}

fn mlp_silu(
    tape: &mut Tape,
    x: NodeId,
    w0: NodeId,
    b0: NodeId,
    w1: NodeId,
    b1: NodeId,
) -> NodeId {
    let h = tape.affine(x, w0, b0);
    let a = tape.silu(h);
    tape.affine(a, w1, b1)
}

fn mlp_relu(
    tape: &mut Tape,
    x: NodeId,
    w0: NodeId,
    b0: NodeId,
    w1: NodeId,
    b1: NodeId,
) -> NodeId {
    let h = tape.affine(x, w0, b0);
    let a = tape.relu(h);
    tape.affine(a, w1, b1)
}

/// Row-wise normalization to zero mean, unit variance (no learned affine;
/// only used when the config enables it).
fn layer_norm(tape: &mut Tape, x: NodeId) -> NodeId {
    let d = tape.value(x).ncols();
    let n = tape.value(x).nrows();
    let sums = tape.sum_cols(x);
    let mean = tape.mul_scalar(sums, 1.0 / d as f64);
    let mean_b = tape.broadcast_col(mean, d);
    let centered = tape.sub(x, mean_b);
    let sq = tape.square(centered);
    let var_sum = tape.sum_cols(sq);
    let var = tape.mul_scalar(var_sum, 1.0 / d as f64);
    let eps = tape.constant(ndarray::Array2::from_elem((n, 1), 1e-8));
    let var_eps = tape.add(var, eps);
    let log_v = tape.log(var_eps);
    let neg_half = tape.mul_scalar(log_v, -0.5);
    let inv_std = tape.exp(neg_half);
    let inv_std_b = tape.broadcast_col(inv_std, d);
    tape.mul(centered, inv_std_b)
}

/// One atom transformer: per-atom input features -> per-atom d-vector.
/// `latent` is the channel the net reads (never the one it transforms).
pub(super) fn atom_transformer(
    tape: &mut Tape,
    net: &BoundTransformer,
    cfg: &FlowConfig,
    cond: NodeId,
    embed_rows: NodeId,
    latent: NodeId,
    attention: &[NodeId],
) -> NodeId {
    let features = tape.concat_cols(&[cond, embed_rows, latent]);
    let mut x = mlp_silu(tape, features, net.in_w0, net.in_b0, net.in_w1, net.in_b1);
    for block in &net.blocks {
        let mut heads = Vec::with_capacity(attention.len());
        for (weights, &value_mat) in attention.iter().zip(&block.attn_values) {
            let projected = tape.matmul(x, value_mat);
            heads.push(tape.matmul(*weights, projected));
        }
        let cat = tape.concat_cols(&heads);
        let mixed = tape.affine(cat, block.mix_w, block.mix_b);
        x = tape.add(x, mixed);
        if cfg.layer_norm {
            x = layer_norm(tape, x);
        }
        let m = mlp_relu(tape, x, block.mlp_w0, block.mlp_b0, block.mlp_w1, block.mlp_b1);
        x = tape.add(x, m);
        if cfg.layer_norm {
            x = layer_norm(tape, x);
        }
    }
    mlp_silu(tape, x, net.out_w0, net.out_b0, net.out_w1, net.out_b1)
}

/// Forward pass of one coupling layer. Returns the transformed latents
/// and this layer's log-det contribution (sum of the clamped log-scales).
pub(super) fn coupling_forward(
    tape: &mut Tape,
    layer: &BoundCoupling,
    cfg: &FlowConfig,
    cond: NodeId,
    embed_rows: NodeId,
    attention: &[NodeId],
    z_pos: NodeId,
    z_aux: NodeId,
) -> (NodeId, NodeId, NodeId) {
    let bound = cfg.scale_clamp;
    let s_pos_raw = atom_transformer(tape, &layer.scale_pos, cfg, cond, embed_rows, z_aux, attention);
    let s_pos = tape.clamp(s_pos_raw, -bound, bound);
    let t_pos = atom_transformer(tape, &layer.shift_pos, cfg, cond, embed_rows, z_aux, attention);
    let scale_pos = tape.exp(s_pos);
    let scaled = tape.mul(scale_pos, z_pos);
    let z_pos_next = tape.add(scaled, t_pos);

    let s_aux_raw =
        atom_transformer(tape, &layer.scale_aux, cfg, cond, embed_rows, z_pos_next, attention);
    let s_aux = tape.clamp(s_aux_raw, -bound, bound);
    let t_aux = atom_transformer(tape, &layer.shift_aux, cfg, cond, embed_rows, z_pos_next, attention);
    let scale_aux = tape.exp(s_aux);
    let scaled_aux = tape.mul(scale_aux, z_aux);
    let z_aux_next = tape.add(scaled_aux, t_aux);

    let sum_pos = tape.sum_all(s_pos);
    let sum_aux = tape.sum_all(s_aux);
    let log_det = tape.add(sum_pos, sum_aux);
    (z_pos_next, z_aux_next, log_det)
}

/// Exact algebraic inverse of [`coupling_forward`]; the auxiliary update
/// is inverted first. Returns the input latents and the log-det of the
/// inverse map (the negated forward contribution at the same point).
pub(super) fn coupling_inverse(
    tape: &mut Tape,
    layer: &BoundCoupling,
    cfg: &FlowConfig,
    cond: NodeId,
    embed_rows: NodeId,
    attention: &[NodeId],
    z_pos_next: NodeId,
    z_aux_next: NodeId,
) -> (NodeId, NodeId, NodeId) {
    let bound = cfg.scale_clamp;
    let s_aux_raw =
        atom_transformer(tape, &layer.scale_aux, cfg, cond, embed_rows, z_pos_next, attention);
    let s_aux = tape.clamp(s_aux_raw, -bound, bound);
    let t_aux = atom_transformer(tape, &layer.shift_aux, cfg, cond, embed_rows, z_pos_next, attention);
    let shifted_aux = tape.sub(z_aux_next, t_aux);
    let neg_s_aux = tape.neg(s_aux);
    let inv_scale_aux = tape.exp(neg_s_aux);
    let z_aux = tape.mul(shifted_aux, inv_scale_aux);

    let s_pos_raw = atom_transformer(tape, &layer.scale_pos, cfg, cond, embed_rows, z_aux, attention);
    let s_pos = tape.clamp(s_pos_raw, -bound, bound);
    let t_pos = atom_transformer(tape, &layer.shift_pos, cfg, cond, embed_rows, z_aux, attention);
    let shifted_pos = tape.sub(z_pos_next, t_pos);
    let neg_s_pos = tape.neg(s_pos);
    let inv_scale_pos = tape.exp(neg_s_pos);
    let z_pos = tape.mul(shifted_pos, inv_scale_pos);

    let sum_pos = tape.sum_all(s_pos);
    let sum_aux = tape.sum_all(s_aux);
    let total = tape.add(sum_pos, sum_aux);
    let log_det_inverse = tape.neg(total);
    (z_pos, z_aux, log_det_inverse)
}

/// Full generative pass in the canonical (centered) frame: latents to
/// output state plus the forward log-det. The position channel gets the
/// skip connection, so a zero network is the identity proposal.
pub(super) fn forward_pass(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &FlowConfig,
    atom_types: &[usize],
    cond: NodeId,
    z_pos: NodeId,
    z_aux: NodeId,
) -> (NodeId, NodeId, NodeId) {
    let attention = attention_weight_nodes(tape, cond, &cfg.lengthscales);
    let embed_rows = tape.gather_rows(bound.embed, atom_types);
    let mut zp = z_pos;
    let mut zv = z_aux;
    let mut log_det = tape.constant_scalar(0.0);
    for layer in &bound.couplings {
        let (p, v, ld) = coupling_forward(tape, layer, cfg, cond, embed_rows, &attention, zp, zv);
        zp = p;
        zv = v;
        log_det = tape.add(log_det, ld);
    }
    let out_pos = tape.add(zp, cond);
    (out_pos, zv, log_det)
}

/// Inverse of [`forward_pass`]: output state (canonical frame) back to
/// latents plus the log-det of the inverse.
pub(super) fn inverse_pass(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &FlowConfig,
    atom_types: &[usize],
    cond: NodeId,
    out_pos: NodeId,
    out_aux: NodeId,
) -> (NodeId, NodeId, NodeId) {
    let attention = attention_weight_nodes(tape, cond, &cfg.lengthscales);
    let embed_rows = tape.gather_rows(bound.embed, atom_types);
    let mut zp = tape.sub(out_pos, cond);
    let mut zv = out_aux;
    let mut log_det = tape.constant_scalar(0.0);
    for layer in bound.couplings.iter().rev() {
        let (p, v, ld) = coupling_inverse(tape, layer, cfg, cond, embed_rows, &attention, zp, zv);
        zp = p;
        zv = v;
        log_det = tape.add(log_det, ld);
    }
    (zp, zv, log_det)
}

/// Standard-normal log-density of a node, summed over entries, as a
/// scalar node (full normalizer included).
pub(super) fn gaussian_log_density_node(tape: &mut Tape, x: NodeId) -> NodeId {
    let len = tape.value(x).len() as f64;
    let sq = tape.square(x);
    let ss = tape.sum_all(sq);
    let quad = tape.mul_scalar(ss, -0.5);
    let norm = tape.constant_scalar(-0.5 * len * (2.0 * std::f64::consts::PI).ln());
    tape.add(quad, norm)
}
