//! The PIDGeuN architecture: a per-node encoder, a stack of graph attention
//! layers, a physics-infused adjacency matrix blending learned attention with
//! admittance-derived weights, a stack of Chebyshev graph convolutions on the
//! blended graph, and a per-node decoder producing predicted rates of change.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AdjacencyMatrix, PowerGraph};
use crate::linalg::Matrix;
use crate::tensor::{batch_norm, BnBatchStats, BnState, Mode, Parameter, Tape, Tensor};

/// Number of extended-state features per bus.
pub const STATE_DIM: usize = 10;
/// Number of measurable features the decoder predicts rates for.
pub const OUTPUT_DIM: usize = 6;
/// LeakyReLU slope used in attention scores.
pub const ATTENTION_LEAKY_EPS: f64 = 0.2;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Layers in the encoder and decoder FCNNs (N_M).
    pub n_mlp_layers: usize,
    /// Graph attention layers (N_A).
    pub n_gal: usize,
    /// Chebyshev graph convolution layers (N_C).
    pub n_gcl: usize,
    /// Chebyshev polynomial order (K).
    pub cheb_order: usize,
    /// Latent width (D).
    pub hidden_size: usize,
    /// Input snapshots per window (C).
    pub input_steps: usize,
    /// Attention heads per GAL (m).
    pub attention_heads: usize,
}

impl ModelConfig {
    /// The nominal configuration: N_M=3, N_A=5, N_C=5, K=5, D=128, C=3,
    /// with 4 attention heads.
    pub fn nominal() -> Self {
        ModelConfig {
            n_mlp_layers: 3,
            n_gal: 5,
            n_gcl: 5,
            cheb_order: 5,
            hidden_size: 128,
            input_steps: 3,
            attention_heads: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mlp_layers < 1 {
            return Err(Error::argument("n_mlp_layers must be ≥ 1"));
        }
        if self.n_gal + self.n_gcl < 1 {
            return Err(Error::argument("need at least one processor layer"));
        }
        if self.n_gcl >= 1 && self.cheb_order < 1 {
            return Err(Error::argument(
                "cheb_order must be ≥ 1 when GCLs are present",
            ));
        }
        if self.input_steps < 1 {
            return Err(Error::argument("input_steps must be ≥ 1"));
        }
        if self.attention_heads < 1 && self.n_gal > 0 {
            return Err(Error::argument("attention_heads must be ≥ 1"));
        }
        if self.hidden_size < 1 {
            return Err(Error::argument("hidden_size must be ≥ 1"));
        }
        Ok(())
    }
}

/// Total effective message-passing steps: N_A + K·N_C.
pub fn effective_mp_steps(config: &ModelConfig) -> usize {
    config.n_gal + config.cheb_order * config.n_gcl
}

/// C consecutive extended-state snapshots flattened per node, current step
/// first. Row i is the 10·C input vector of bus i.
#[derive(Debug, Clone)]
pub struct SnapshotWindow {
    pub n: usize,
    pub c: usize,
    data: Vec<f64>,
}

impl SnapshotWindow {
    /// `steps[0]` is the current snapshot (N×10 row-major), `steps[1]` one
    /// step back, and so on.
    pub fn from_steps(steps: &[&[f64]], n: usize) -> Result<Self> {
        let c = steps.len();
        if c == 0 {
            return Err(Error::argument("window needs at least one step"));
        }
        for s in steps {
            if s.len() != n * STATE_DIM {
                return Err(Error::argument("window step has wrong length"));
            }
        }
        let mut data = Vec::with_capacity(n * STATE_DIM * c);
        for node in 0..n {
            for step in steps {
                data.extend_from_slice(&step[node * STATE_DIM..(node + 1) * STATE_DIM]);
            }
        }
        Ok(SnapshotWindow { n, c, data })
    }

    /// Rebuilds a window from already-flattened per-node rows.
    pub fn from_flat(n: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * STATE_DIM * c);
        SnapshotWindow { n, c, data }
    }

    pub fn row(&self, node: usize) -> &[f64] {
        let w = STATE_DIM * self.c;
        &self.data[node * w..(node + 1) * w]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Precomputed per-graph constants shared by every forward pass: the
/// admittance-based adjacency, its 0/1 edge mask, and neighbor lists.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub n: usize,
    pub adjacency: AdjacencyMatrix,
    pub mask: Vec<f64>,
    pub neighbors: Vec<Vec<usize>>,
}

impl GraphContext {
    pub fn new(graph: &PowerGraph, adjacency: AdjacencyMatrix) -> Result<Self> {
        let n = graph.n_buses();
        if adjacency.n() != n {
            return Err(Error::argument("adjacency size does not match graph"));
        }
        let mut mask = vec![0.0; n * n];
        for (i, j) in graph.edges() {
            mask[i * n + j] = 1.0;
            mask[j * n + i] = 1.0;
        }
        Ok(GraphContext {
            n,
            adjacency,
            mask,
            neighbors: graph.neighbors(),
        })
    }
}

/// Learned attention weights over the graph's edge set. Each row is a
/// probability distribution over the node's neighbors; the matrix is
/// generally not symmetric.
#[derive(Debug, Clone)]
pub struct AttentionAdjacency {
    pub weights: Matrix,
}

impl AttentionAdjacency {
    /// Validates row-stochasticity over the neighbor support and zero
    /// entries elsewhere.
    pub fn new(weights: Matrix, neighbors: &[Vec<usize>]) -> Result<Self> {
        let n = weights.rows;
        if weights.cols != n || neighbors.len() != n {
            return Err(Error::argument("attention matrix size mismatch"));
        }
        for u in 0..n {
            let mut sum = 0.0;
            for v in 0..n {
                let w = weights[(u, v)];
                if neighbors[u].contains(&v) {
                    sum += w;
                } else if w != 0.0 {
                    return Err(Error::structural(format!(
                        "attention weight off the edge set at ({u},{v})"
                    )));
                }
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::structural(format!(
                    "attention row {u} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(AttentionAdjacency { weights })
    }
}

/// Â = ½(A_α + A): keeps the admittance graph's topology with learned,
/// generally non-symmetric weights.
pub fn physics_infused_adjacency(
    attention: &AttentionAdjacency,
    adjacency: &AdjacencyMatrix,
) -> Result<Matrix> {
    let n = adjacency.n();
    if attention.weights.rows != n {
        return Err(Error::structural("attention/adjacency size mismatch"));
    }
    for i in 0..n {
        for j in 0..n {
            let phys = adjacency.weights[(i, j)] != 0.0;
            let attn = attention.weights[(i, j)] != 0.0;
            if attn && !phys {
                return Err(Error::structural(format!(
                    "attention support exceeds adjacency support at ({i},{j})"
                )));
            }
        }
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n * n {
        out.data[i] = 0.5 * (attention.weights.data[i] + adjacency.weights.data[i]);
    }
    Ok(out)
}

/// Linear layer computing `x·W + b` with `W: [in×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    fn init(name: &str, dim_in: usize, dim_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Parameter::glorot(
                format!("{name}.w"),
                vec![dim_in, dim_out],
                dim_in,
                dim_out,
                rng,
            ),
            bias: Parameter::zeros(format!("{name}.b"), vec![1, dim_out]),
        }
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let w = tape.param(&self.weight)?;
        let b = tape.param(&self.bias)?;
        let y = tape.matmul(x, &w)?;
        tape.add_rowvec(&y, &b)
    }
}

/// The σ used throughout the processors: batch norm followed by PReLU.
#[derive(Debug, Clone)]
pub struct ActBlock {
    pub name: String,
    pub gamma: Parameter,
    pub beta: Parameter,
    pub prelu_theta: Parameter,
    pub bn: BnState,
}

impl ActBlock {
    fn init(name: &str, dim: usize) -> Self {
        ActBlock {
            name: name.to_string(),
            gamma: Parameter::constant(format!("{name}.bn.gamma"), vec![1, dim], 1.0),
            beta: Parameter::zeros(format!("{name}.bn.beta"), vec![1, dim]),
            prelu_theta: Parameter::constant(format!("{name}.prelu.theta"), vec![1], 0.25),
            bn: BnState::new(dim),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
        sink: Option<&mut BnUpdates>,
    ) -> Result<Tensor> {
        let gamma = tape.param(&self.gamma)?;
        let beta = tape.param(&self.beta)?;
        let (y, stats) = batch_norm(tape, x, &gamma, &beta, &self.bn, mode)?;
        if let (Some(sink), Some(stats)) = (sink, stats) {
            sink.0.push((self.name.clone(), stats));
        }
        let theta = tape.param(&self.prelu_theta)?;
        tape.prelu(&y, &theta)
    }
}

/// Batch statistics collected during a training-mode forward pass, to be
/// folded into the owning layers' running state after the step.
#[derive(Debug, Default)]
pub struct BnUpdates(Vec<(String, BnBatchStats)>);

impl BnUpdates {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Plain fully-connected stack (the linear maps only; activations between
/// layers are owned by the caller).
#[derive(Debug, Clone)]
pub struct Fcnn {
    pub linears: Vec<Linear>,
}

impl Fcnn {
    /// `dims = [d_in, d_1, ..., d_out]`, one linear per consecutive pair.
    fn init(name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let linears = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(&format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Fcnn { linears }
    }

    /// Scalar count of the weight and bias entries.
    pub fn parameter_count(&self) -> usize {
        self.linears
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// Shared per-node FCNN with BN+PReLU after each hidden layer and a linear
/// final layer. Used for both the encoder and the decoder.
#[derive(Debug, Clone)]
pub struct NodeMlp {
    pub fcnn: Fcnn,
    pub acts: Vec<ActBlock>,
}

impl NodeMlp {
    fn init(name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let fcnn = Fcnn::init(name, dims, rng);
        let acts = (0..dims.len().saturating_sub(2))
            .map(|i| ActBlock::init(&format!("{name}.act{i}"), dims[i + 1]))
            .collect();
        NodeMlp { fcnn, acts }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
        sink: &mut Option<&mut BnUpdates>,
    ) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.fcnn.linears.len() - 1;
        for (i, lin) in self.fcnn.linears.iter().enumerate() {
            h = lin.forward(tape, &h)?;
            if i < last {
                h = self.acts[i].forward(tape, &h, mode, sink.as_deref_mut())?;
            }
        }
        Ok(h)
    }
}

/// One multi-head graph attention layer.
#[derive(Debug, Clone)]
pub struct GalLayer {
    pub theta_alpha: Parameter,
    /// Per head: score vectors applied to the transformed source and
    /// destination features. No score bias: a shared offset cancels in the
    /// softmax and would never receive gradient.
    pub heads: Vec<(Parameter, Parameter)>,
    pub act: ActBlock,
}

impl GalLayer {
    fn init(name: &str, d: usize, m: usize, rng: &mut ChaCha8Rng) -> Self {
        let theta_alpha =
            Parameter::glorot(format!("{name}.theta_alpha"), vec![d, d], d, d, rng);
        let heads = (0..m)
            .map(|k| {
                (
                    Parameter::glorot(format!("{name}.h{k}.src"), vec![d, 1], d, 1, rng),
                    Parameter::glorot(format!("{name}.h{k}.dst"), vec![d, 1], d, 1, rng),
                )
            })
            .collect();
        GalLayer {
            theta_alpha,
            heads,
            act: ActBlock::init(&format!("{name}.act"), d),
        }
    }

    /// Returns the updated latents and the head-averaged attention
    /// adjacency (still on the tape: it feeds the physics-infused blend).
    pub fn forward(
        &self,
        tape: &mut Tape,
        h: &Tensor,
        ctx: &GraphContext,
        mode: Mode,
        sink: Option<&mut BnUpdates>,
    ) -> Result<(Tensor, Tensor)> {
        let n = ctx.n;
        if ctx.neighbors.iter().any(|nb| nb.is_empty()) {
            return Err(Error::structural(
                "graph attention requires every node to have a neighbor",
            ));
        }
        let mask = tape.leaf(ctx.mask.clone(), vec![n, n])?;
        let ones_row = tape.leaf(vec![1.0; n], vec![1, n])?;

        let theta = tape.param(&self.theta_alpha)?;
        let hw = tape.matmul(h, &theta)?;

        let mut alpha_sum: Option<Tensor> = None;
        for (a_src, a_dst) in &self.heads {
            let src = tape.param(a_src)?;
            let dst = tape.param(a_dst)?;
            let s_src = tape.matmul(&hw, &src)?; // [N×1]
            let s_dst = tape.matmul(&hw, &dst)?; // [N×1]
            // e[u,v] = s_src[u] + s_dst[v]
            let src_grid = tape.matmul(&s_src, &ones_row)?;
            let dst_row = tape.reshape(&s_dst, vec![1, n])?;
            let e = tape.add_rowvec(&src_grid, &dst_row)?;
            let e = tape.leaky_relu(&e, ATTENTION_LEAKY_EPS)?;
            // Sum-of-exp normalization over each node's neighbor set, with a
            // detached row max for overflow safety (softmax is shift
            // invariant, so this changes nothing analytically).
            let row_max = tape.row_max_masked_const(&e, &mask)?;
            let neg_max = tape.scalar_mul(&row_max, -1.0)?;
            let shift_grid = tape.matmul(&neg_max, &ones_row)?;
            let e_shifted = tape.add(&e, &shift_grid)?;
            let expd = tape.exp(&e_shifted)?;
            let masked = tape.hadamard(&expd, &mask)?;
            let row_sums = tape.row_sum(&masked)?;
            let inv = tape.recip(&row_sums)?;
            let alpha = tape.mul_colvec(&masked, &inv)?;
            alpha_sum = Some(match alpha_sum {
                None => alpha,
                Some(acc) => tape.add(&acc, &alpha)?,
            });
        }
        let a_alpha = tape.scalar_mul(&alpha_sum.unwrap(), 1.0 / self.heads.len() as f64)?;

        let aggregated = tape.matmul(&a_alpha, &hw)?;
        let out = self.act.forward(tape, &aggregated, mode, sink)?;
        Ok((out, a_alpha))
    }
}

/// One Chebyshev graph convolution layer of order K (K+1 coefficient
/// matrices).
#[derive(Debug, Clone)]
pub struct GclLayer {
    pub thetas: Vec<Parameter>,
    pub act: ActBlock,
}

impl GclLayer {
    fn init(name: &str, d: usize, order: usize, rng: &mut ChaCha8Rng) -> Self {
        let thetas = (0..=order)
            .map(|k| Parameter::glorot(format!("{name}.t{k}"), vec![d, d], d, d, rng))
            .collect();
        GclLayer {
            thetas,
            act: ActBlock::init(&format!("{name}.act"), d),
        }
    }

    /// `σ(Σ_{k=0}^{K} T_k(L̃)·H·Θ_k)` with the three-term recursion
    /// T_0 H = H, T_1 H = L̃H, T_k H = 2·L̃·T_{k-1}H − T_{k-2}H.
    pub fn forward(
        &self,
        tape: &mut Tape,
        h: &Tensor,
        scaled_laplacian: &Tensor,
        mode: Mode,
        sink: Option<&mut BnUpdates>,
    ) -> Result<Tensor> {
        let acc = self.forward_preactivation(tape, h, scaled_laplacian)?;
        self.act.forward(tape, &acc, mode, sink)
    }

    /// The filter output before BN+PReLU; the spectral-oracle tests compare
    /// against this.
    pub fn forward_preactivation(
        &self,
        tape: &mut Tape,
        h: &Tensor,
        scaled_laplacian: &Tensor,
    ) -> Result<Tensor> {
        if self.thetas.len() < 2 {
            return Err(Error::argument("Chebyshev order must be at least 1"));
        }
        let theta0 = tape.param(&self.thetas[0])?;
        let mut acc = tape.matmul(h, &theta0)?;
        let mut t_prev2 = h.clone();
        let mut t_prev1 = tape.matmul(scaled_laplacian, h)?;
        let theta1 = tape.param(&self.thetas[1])?;
        let term1 = tape.matmul(&t_prev1, &theta1)?;
        acc = tape.add(&acc, &term1)?;
        for theta_k in self.thetas.iter().skip(2) {
            let lt = tape.matmul(scaled_laplacian, &t_prev1)?;
            let lt2 = tape.scalar_mul(&lt, 2.0)?;
            let tk = tape.sub(&lt2, &t_prev2)?;
            let theta = tape.param(theta_k)?;
            let term = tape.matmul(&tk, &theta)?;
            acc = tape.add(&acc, &term)?;
            t_prev2 = t_prev1;
            t_prev1 = tk;
        }
        Ok(acc)
    }
}

/// Output of one model forward pass.
pub struct ForwardOutput {
    /// Predicted rates of change, `[N×6]`, in the input's normalized units.
    pub rates: Tensor,
    /// Head-averaged attention matrices, one per GAL, copied off the tape.
    pub attention: Vec<Matrix>,
}

/// The full model.
#[derive(Debug, Clone)]
pub struct PidgeunModel {
    pub config: ModelConfig,
    pub encoder: NodeMlp,
    pub gals: Vec<GalLayer>,
    pub gcls: Vec<GclLayer>,
    pub decoder: NodeMlp,
}

fn collect_mlp<'a>(mlp: &'a NodeMlp, out: &mut Vec<&'a Parameter>) {
    for l in &mlp.fcnn.linears {
        out.push(&l.weight);
        out.push(&l.bias);
    }
    for a in &mlp.acts {
        out.push(&a.gamma);
        out.push(&a.beta);
        out.push(&a.prelu_theta);
    }
}

fn collect_mlp_mut<'a>(mlp: &'a mut NodeMlp, out: &mut Vec<&'a mut Parameter>) {
    for l in &mut mlp.fcnn.linears {
        out.push(&mut l.weight);
        out.push(&mut l.bias);
    }
    for a in &mut mlp.acts {
        out.push(&mut a.gamma);
        out.push(&mut a.beta);
        out.push(&mut a.prelu_theta);
    }
}

impl PidgeunModel {
    /// Deterministic initialization from a seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_size;

        let mut enc_dims = vec![STATE_DIM * config.input_steps];
        enc_dims.extend(std::iter::repeat(d).take(config.n_mlp_layers));
        let encoder = NodeMlp::init("enc", &enc_dims, &mut rng);

        let gals = (0..config.n_gal)
            .map(|i| GalLayer::init(&format!("gal{i}"), d, config.attention_heads, &mut rng))
            .collect();
        let gcls = (0..config.n_gcl)
            .map(|i| GclLayer::init(&format!("gcl{i}"), d, config.cheb_order, &mut rng))
            .collect();

        let mut dec_dims = vec![d; config.n_mlp_layers];
        dec_dims.push(OUTPUT_DIM);
        let decoder = NodeMlp::init("dec", &dec_dims, &mut rng);

        Ok(PidgeunModel {
            config,
            encoder,
            gals,
            gcls,
            decoder,
        })
    }

    /// Parameters in a fixed registry order (encoder, GALs, GCLs, decoder).
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        collect_mlp(&self.encoder, &mut out);
        for g in &self.gals {
            out.push(&g.theta_alpha);
            for (s, d) in &g.heads {
                out.push(s);
                out.push(d);
            }
            out.push(&g.act.gamma);
            out.push(&g.act.beta);
            out.push(&g.act.prelu_theta);
        }
        for g in &self.gcls {
            for t in &g.thetas {
                out.push(t);
            }
            out.push(&g.act.gamma);
            out.push(&g.act.beta);
            out.push(&g.act.prelu_theta);
        }
        collect_mlp(&self.decoder, &mut out);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        collect_mlp_mut(&mut self.encoder, &mut out);
        for g in &mut self.gals {
            out.push(&mut g.theta_alpha);
            for (s, d) in &mut g.heads {
                out.push(s);
                out.push(d);
            }
            out.push(&mut g.act.gamma);
            out.push(&mut g.act.beta);
            out.push(&mut g.act.prelu_theta);
        }
        for g in &mut self.gcls {
            for t in &mut g.thetas {
                out.push(t);
            }
            out.push(&mut g.act.gamma);
            out.push(&mut g.act.beta);
            out.push(&mut g.act.prelu_theta);
        }
        collect_mlp_mut(&mut self.decoder, &mut out);
        out
    }

    /// Exact count of scalar trainable values.
    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn act_blocks(&self) -> Vec<&ActBlock> {
        let mut out: Vec<&ActBlock> = Vec::new();
        out.extend(self.encoder.acts.iter());
        out.extend(self.gals.iter().map(|g| &g.act));
        out.extend(self.gcls.iter().map(|g| &g.act));
        out.extend(self.decoder.acts.iter());
        out
    }

    pub fn act_blocks_mut(&mut self) -> Vec<&mut ActBlock> {
        let mut out: Vec<&mut ActBlock> = Vec::new();
        out.extend(self.encoder.acts.iter_mut());
        out.extend(self.gals.iter_mut().map(|g| &mut g.act));
        out.extend(self.gcls.iter_mut().map(|g| &mut g.act));
        out.extend(self.decoder.acts.iter_mut());
        out
    }

    /// Folds batch statistics gathered during a training forward pass into
    /// the layers' running estimates.
    pub fn apply_bn_updates(&mut self, updates: &BnUpdates) {
        let mut blocks = self.act_blocks_mut();
        for (name, stats) in &updates.0 {
            if let Some(block) = blocks.iter_mut().find(|b| b.name == *name) {
                block.bn.update(stats);
            }
        }
    }

    /// Per-node encoder: the shared FCNN applied to each flattened window
    /// row.
    pub fn encode(
        &self,
        tape: &mut Tape,
        window: &SnapshotWindow,
        mode: Mode,
        mut sink: Option<&mut BnUpdates>,
    ) -> Result<Tensor> {
        if window.c != self.config.input_steps {
            return Err(Error::argument(format!(
                "window has {} steps, model expects {}",
                window.c, self.config.input_steps
            )));
        }
        let x = tape.leaf(
            window.as_slice().to_vec(),
            vec![window.n, STATE_DIM * window.c],
        )?;
        self.encoder.forward(tape, &x, mode, &mut sink)
    }

    /// Per-node decoder to the 6 predicted rates.
    pub fn decode(
        &self,
        tape: &mut Tape,
        latent: &Tensor,
        mode: Mode,
        mut sink: Option<&mut BnUpdates>,
    ) -> Result<Tensor> {
        self.decoder.forward(tape, latent, mode, &mut sink)
    }

    /// Full forward pass: encode → GAL stack → physics-infused adjacency →
    /// scaled Laplacian → GCL stack → decode.
    ///
    /// With N_A = 0 the convolutions use the admittance adjacency directly;
    /// with N_C = 0 the last attention output goes straight to the decoder
    /// and the attention coefficients are unused downstream.
    pub fn forward(
        &self,
        tape: &mut Tape,
        window: &SnapshotWindow,
        ctx: &GraphContext,
        mode: Mode,
        mut sink: Option<&mut BnUpdates>,
    ) -> Result<ForwardOutput> {
        if window.n != ctx.n {
            return Err(Error::argument("window and graph disagree on bus count"));
        }
        let mut h = self.encode(tape, window, mode, sink.as_deref_mut())?;

        let mut attention = Vec::with_capacity(self.gals.len());
        let mut last_alpha: Option<Tensor> = None;
        for gal in &self.gals {
            let (h_next, alpha) = gal.forward(tape, &h, ctx, mode, sink.as_deref_mut())?;
            attention.push(Matrix::from_vec(ctx.n, ctx.n, alpha.data().to_vec()));
            h = h_next;
            last_alpha = Some(alpha);
        }

        if !self.gcls.is_empty() {
            let a_const = tape.leaf(ctx.adjacency.weights.data.clone(), vec![ctx.n, ctx.n])?;
            let blended = match last_alpha {
                Some(alpha) => {
                    let sum = tape.add(&alpha, &a_const)?;
                    tape.scalar_mul(&sum, 0.5)?
                }
                None => a_const,
            };
            let l_scaled = scaled_laplacian_on_tape(tape, &blended)?;
            for gcl in &self.gcls {
                h = gcl.forward(tape, &h, &l_scaled, mode, sink.as_deref_mut())?;
            }
        }

        let rates = self.decode(tape, &h, mode, sink)?;
        Ok(ForwardOutput { rates, attention })
    }
}

/// Scaled Laplacian of an adjacency-like matrix on the tape, with the fixed
/// bound λ_max = 2 (exact for symmetric normalized Laplacians attaining the
/// bound; for the blended non-symmetric Â it keeps the recursion contained
/// and differentiable):
/// `L̃ = (2/2)(I − D^{-1/2} Â D^{-1/2}) − I = −D^{-1/2} Â D^{-1/2}`
/// where D is the diagonal of row sums.
pub fn scaled_laplacian_on_tape(tape: &mut Tape, adjacency: &Tensor) -> Result<Tensor> {
    let n = adjacency.shape()[0];
    let row_sums = tape.row_sum(adjacency)?;
    let sqrt_d = tape.sqrt(&row_sums)?;
    let inv_sqrt = tape.recip(&sqrt_d)?; // [N×1]
    let row_scaled = tape.mul_colvec(adjacency, &inv_sqrt)?;
    let inv_sqrt_row = tape.reshape(&inv_sqrt, vec![1, n])?;
    let normalized = tape.mul_rowvec(&row_scaled, &inv_sqrt_row)?;
    tape.scalar_mul(&normalized, -1.0)
}
