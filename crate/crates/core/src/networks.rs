//! Function approximators: policy optimizers, Q-networks and model networks.
//!
//! Each network owns its [`ParamStore`] and records its forward pass onto a
//! caller-supplied [`Graph`], so several networks can share one graph and
//! gradients reach whichever stores are not frozen.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::distributions::{PolicyParams, LOG_SIGMA_MAX, LOG_SIGMA_MIN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width and depth of a multilayer perceptron.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpShape {
    pub hidden: usize,
    pub layers: usize,
}

impl MlpShape {
    pub const POLICY: MlpShape = MlpShape { hidden: 256, layers: 2 };
    pub const Q_A: MlpShape = MlpShape { hidden: 256, layers: 2 };
    pub const Q_B: MlpShape = MlpShape { hidden: 512, layers: 3 };
    pub const MODEL: MlpShape = MlpShape { hidden: 256, layers: 2 };
}

/// Output-layer scale so fresh policies start near `mu = 0, sigma = 1`.
const POLICY_HEAD_SCALE: f64 = 1e-2;
/// Initial gate logit; `sigmoid(1) ~ 0.73`.
const GATE_BIAS_INIT: f64 = 1.0;

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// Fully connected layer `x @ w + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, in_dim, out_dim, bound * scale))?;
        let b = store.add(format!("{name}.b"), uniform(rng, 1, out_dim, bound * scale))?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.affine(x, w, b)
    }
}

/// Layer normalization with learned elementwise gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: usize,
    bias: usize,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[1, dim], 1.0))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let scaled = g.mul(n, gain)?;
        g.add(scaled, bias)
    }
}

fn check_cols(g: &Graph, v: Var, expected: usize, what: &str) -> Result<()> {
    let got = g.value(v).cols();
    if got != expected {
        return Err(Error::Shape {
            node: v.index(),
            op: "network_input",
            detail: format!("{what} has {got} columns, expected {expected}"),
        });
    }
    Ok(())
}

/// Policy distribution parameters as graph nodes, each `[rows, |A|]`.
#[derive(Clone, Copy, Debug)]
pub struct PolicyVars {
    pub mu: Var,
    pub log_sigma: Var,
}

impl PolicyVars {
    /// Reads row `r` back as plain parameters.
    pub fn params_at(&self, g: &Graph, r: usize) -> Result<PolicyParams> {
        PolicyParams::from_log_sigma(g.value(self.mu).row_slice(r).to_vec(), g.value(self.log_sigma).row_slice(r))
    }

    pub fn all_params(&self, g: &Graph) -> Result<Vec<PolicyParams>> {
        (0..g.value(self.mu).rows()).map(|r| self.params_at(g, r)).collect()
    }
}

/// Direct amortized policy: state to `(mu, log sigma)` in one pass.
#[derive(Clone, Debug)]
pub struct DirectPolicyNet {
    pub store: ParamStore,
    hidden: Vec<Linear>,
    head: Linear,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl DirectPolicyNet {
    pub fn new(state_dim: usize, action_dim: usize, shape: MlpShape, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut hidden = Vec::with_capacity(shape.layers);
        let mut width = state_dim;
        for i in 0..shape.layers {
            hidden.push(Linear::new(&mut store, &format!("hidden{i}"), width, shape.hidden, 1.0, rng)?);
            width = shape.hidden;
        }
        let head = Linear::new(&mut store, "head", width, 2 * action_dim, POLICY_HEAD_SCALE, rng)?;
        Ok(DirectPolicyNet {
            store,
            hidden,
            head,
            state_dim,
            action_dim,
        })
    }

    /// Sets the output layer to zero, so every state maps to `mu = 0, sigma = 1`.
    pub fn zero_head(&mut self) {
        for idx in [self.head.w, self.head.b] {
            self.store.value_mut(idx).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn forward(&self, g: &mut Graph, s: Var) -> Result<PolicyVars> {
        check_cols(g, s, self.state_dim, "state")?;
        let mut h = s;
        for layer in &self.hidden {
            let z = layer.forward(g, &self.store, h)?;
            h = g.relu(z)?;
        }
        let out = self.head.forward(g, &self.store, h)?;
        let mu = g.slice_cols(out, 0, self.action_dim)?;
        let ls = g.slice_cols(out, self.action_dim, self.action_dim)?;
        let log_sigma = g.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok(PolicyVars { mu, log_sigma })
    }

    /// `lambda <- f(s)` for a single state.
    pub fn direct_forward(&self, s: &[f64]) -> Result<PolicyParams> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let sv = g.input(Tensor::row(s.to_vec()));
        let pv = self.forward(&mut g, sv)?;
        pv.params_at(&g, 0)
    }

    pub fn param_count(state_dim: usize, action_dim: usize, shape: MlpShape) -> usize {
        let mut n = 0;
        let mut width = state_dim;
        for _ in 0..shape.layers {
            n += width * shape.hidden + shape.hidden;
            width = shape.hidden;
        }
        n + width * 2 * action_dim + 2 * action_dim
    }
}

/// Iterative amortized policy optimizer.
///
/// Consumes the state, the current `[mu, log sigma]` and the gradient of the
/// objective with respect to them, each layer-normalized separately, and
/// emits an update `delta` and a gate `omega` for every component.
#[derive(Clone, Debug)]
pub struct IterativePolicyNet {
    pub store: ParamStore,
    norm_state: LayerNorm,
    norm_lambda: LayerNorm,
    norm_grad: LayerNorm,
    hidden: Vec<Linear>,
    head: Linear,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// `(delta, omega)`, each `[rows, 2|A|]` in `[mu, log sigma]` order.
#[derive(Clone, Copy, Debug)]
pub struct UpdateVars {
    pub delta: Var,
    pub omega: Var,
}

impl IterativePolicyNet {
    pub fn new(state_dim: usize, action_dim: usize, shape: MlpShape, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let lam = 2 * action_dim;
        let norm_state = LayerNorm::new(&mut store, "norm_state", state_dim)?;
        let norm_lambda = LayerNorm::new(&mut store, "norm_lambda", lam)?;
        let norm_grad = LayerNorm::new(&mut store, "norm_grad", lam)?;
        let mut hidden = Vec::with_capacity(shape.layers);
        let mut width = state_dim + 2 * lam;
        for i in 0..shape.layers {
            hidden.push(Linear::new(&mut store, &format!("hidden{i}"), width, shape.hidden, 1.0, rng)?);
            width = shape.hidden;
        }
        let head = Linear::new(&mut store, "head", width, 2 * lam, POLICY_HEAD_SCALE, rng)?;
        let gate_bias = store.value_mut(head.b).data_mut();
        gate_bias[lam..].iter_mut().for_each(|b| *b = GATE_BIAS_INIT);
        Ok(IterativePolicyNet {
            store,
            norm_state,
            norm_lambda,
            norm_grad,
            hidden,
            head,
            state_dim,
            action_dim,
        })
    }

    /// `s: [rows, |S|]`, `lambda` and `grad`: `[rows, 2|A|]`.
    pub fn forward(&self, g: &mut Graph, s: Var, lambda: Var, grad: Var) -> Result<UpdateVars> {
        let lam = 2 * self.action_dim;
        check_cols(g, s, self.state_dim, "state")?;
        check_cols(g, lambda, lam, "lambda")?;
        check_cols(g, grad, lam, "gradient")?;
        let ns = self.norm_state.forward(g, &self.store, s)?;
        let nl = self.norm_lambda.forward(g, &self.store, lambda)?;
        let ng = self.norm_grad.forward(g, &self.store, grad)?;
        let mut h = g.concat(&[ns, nl, ng])?;
        for layer in &self.hidden {
            let z = layer.forward(g, &self.store, h)?;
            h = g.relu(z)?;
        }
        let out = self.head.forward(g, &self.store, h)?;
        let d_mu = g.slice_cols(out, 0, self.action_dim)?;
        let d_ls = g.slice_cols(out, self.action_dim, self.action_dim)?;
        let d_ls = g.clamp(d_ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        let delta = g.concat(&[d_mu, d_ls])?;
        let logits = g.slice_cols(out, lam, lam)?;
        let omega = g.sigmoid(logits)?;
        Ok(UpdateVars { delta, omega })
    }

    /// Value-level `(delta, omega)` for one state.
    pub fn iterative_forward(&self, s: &[f64], lambda: &PolicyParams, grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let sv = g.input(Tensor::row(s.to_vec()));
        let lv = g.input(Tensor::row(lambda.to_flat()));
        let gv = g.input(Tensor::row(grad.to_vec()));
        let u = self.forward(&mut g, sv, lv, gv)?;
        Ok((g.value(u.delta).data().to_vec(), g.value(u.omega).data().to_vec()))
    }

    pub fn param_count(state_dim: usize, action_dim: usize, shape: MlpShape) -> usize {
        let lam = 2 * action_dim;
        let norms = 2 * state_dim + 4 * lam;
        let mut n = 0;
        let mut width = state_dim + 2 * lam;
        for _ in 0..shape.layers {
            n += width * shape.hidden + shape.hidden;
            width = shape.hidden;
        }
        norms + n + width * 2 * lam + 2 * lam
    }
}

/// Q-network architecture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum QArch {
    /// Sequential ReLU MLP, no normalization.
    #[default]
    A,
    /// ELU highway blocks with layer normalization.
    B,
}

/// One highway block: `gate * elu(ln(W x)) + (1 - gate) * carry(x)`.
#[derive(Clone, Debug)]
pub struct HighwayBlock {
    transform: Linear,
    gate: Linear,
    norm: LayerNorm,
    projection: Option<Linear>,
}

impl HighwayBlock {
    fn new(store: &mut ParamStore, name: &str, in_dim: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        let transform = Linear::new(store, &format!("{name}.transform"), in_dim, width, 1.0, rng)?;
        let gate = Linear::new(store, &format!("{name}.gate"), in_dim, width, 1.0, rng)?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), width)?;
        let projection = if in_dim != width {
            Some(Linear::new(store, &format!("{name}.proj"), in_dim, width, 1.0, rng)?)
        } else {
            None
        };
        Ok(HighwayBlock {
            transform,
            gate,
            norm,
            projection,
        })
    }

    /// `gate_override` replaces the learned transform gate with a constant.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, gate_override: Option<f64>) -> Result<Var> {
        let z = self.transform.forward(g, store, x)?;
        let z = self.norm.forward(g, store, z)?;
        let h = g.elu(z)?;
        let t = match gate_override {
            Some(c) => g.scalar(c),
            None => {
                let logits = self.gate.forward(g, store, x)?;
                g.sigmoid(logits)?
            }
        };
        let carry = match &self.projection {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        let gated = g.mul(t, h)?;
        let one_minus = {
            let neg = g.neg(t)?;
            g.add_scalar(neg, 1.0)?
        };
        let kept = g.mul(one_minus, carry)?;
        g.add(gated, kept)
    }
}

#[derive(Clone, Debug)]
enum QBody {
    Sequential(Vec<Linear>),
    Highway(Vec<HighwayBlock>),
}

/// Soft action-value network `Q(s, a)`.
#[derive(Clone, Debug)]
pub struct QNet {
    pub store: ParamStore,
    body: QBody,
    out: Linear,
    pub arch: QArch,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl QNet {
    pub fn new(state_dim: usize, action_dim: usize, arch: QArch, shape: MlpShape, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut width = state_dim + action_dim;
        let body = match arch {
            QArch::A => {
                let mut layers = Vec::new();
                for i in 0..shape.layers {
                    layers.push(Linear::new(&mut store, &format!("hidden{i}"), width, shape.hidden, 1.0, rng)?);
                    width = shape.hidden;
                }
                QBody::Sequential(layers)
            }
            QArch::B => {
                let mut blocks = Vec::new();
                for i in 0..shape.layers {
                    blocks.push(HighwayBlock::new(&mut store, &format!("block{i}"), width, shape.hidden, rng)?);
                    width = shape.hidden;
                }
                QBody::Highway(blocks)
            }
        };
        let out = Linear::new(&mut store, "out", width, 1, 1.0, rng)?;
        Ok(QNet {
            store,
            body,
            out,
            arch,
            state_dim,
            action_dim,
        })
    }

    /// `[rows, 1]` action values.
    pub fn forward(&self, g: &mut Graph, s: Var, a: Var) -> Result<Var> {
        check_cols(g, s, self.state_dim, "state")?;
        check_cols(g, a, self.action_dim, "action")?;
        let mut h = g.concat(&[s, a])?;
        match &self.body {
            QBody::Sequential(layers) => {
                for layer in layers {
                    let z = layer.forward(g, &self.store, h)?;
                    h = g.relu(z)?;
                }
            }
            QBody::Highway(blocks) => {
                for block in blocks {
                    h = block.forward(g, &self.store, h, None)?;
                }
            }
        }
        self.out.forward(g, &self.store, h)
    }

    /// Highway blocks, empty for architecture A.
    pub fn highway_blocks(&self) -> &[HighwayBlock] {
        match &self.body {
            QBody::Highway(b) => b,
            QBody::Sequential(_) => &[],
        }
    }

    pub fn q_forward(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let sv = g.input(Tensor::row(s.to_vec()));
        let av = g.input(Tensor::row(a.to_vec()));
        let q = self.forward(&mut g, sv, av)?;
        Ok(g.value(q).item())
    }

    pub fn param_count(state_dim: usize, action_dim: usize, arch: QArch, shape: MlpShape) -> usize {
        let w = shape.hidden;
        let mut width = state_dim + action_dim;
        let mut n = 0;
        for _ in 0..shape.layers {
            n += match arch {
                QArch::A => width * w + w,
                QArch::B => {
                    let proj = if width != w { width * w + w } else { 0 };
                    2 * (width * w + w) + 2 * w + proj
                }
            };
            width = w;
        }
        n + width + 1
    }
}

/// Layer-normalized leaky-ReLU trunk shared by the model networks.
#[derive(Clone, Debug)]
struct ModelTrunk {
    layers: Vec<(Linear, LayerNorm)>,
}

impl ModelTrunk {
    fn new(store: &mut ParamStore, in_dim: usize, shape: MlpShape, rng: &mut impl Rng) -> Result<(Self, usize)> {
        let mut layers = Vec::new();
        let mut width = in_dim;
        for i in 0..shape.layers {
            let lin = Linear::new(store, &format!("hidden{i}"), width, shape.hidden, 1.0, rng)?;
            let ln = LayerNorm::new(store, &format!("norm{i}"), shape.hidden)?;
            layers.push((lin, ln));
            width = shape.hidden;
        }
        Ok((ModelTrunk { layers }, width))
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (lin, ln) in &self.layers {
            let z = lin.forward(g, store, h)?;
            let z = ln.forward(g, store, z)?;
            h = g.leaky_relu(z)?;
        }
        Ok(h)
    }

    fn param_count(in_dim: usize, shape: MlpShape) -> usize {
        let mut n = 0;
        let mut width = in_dim;
        for _ in 0..shape.layers {
            n += width * shape.hidden + 3 * shape.hidden;
            width = shape.hidden;
        }
        n
    }
}

/// Gaussian mean and global log-std of a model prediction.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    /// `[1, dim]`, broadcast over rows.
    pub log_std: Var,
}

/// State-transition model predicting `s' = s + delta(s, a)`.
#[derive(Clone, Debug)]
pub struct DynamicsNet {
    pub store: ParamStore,
    trunk: ModelTrunk,
    out: Linear,
    log_std: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl DynamicsNet {
    pub fn new(state_dim: usize, action_dim: usize, shape: MlpShape, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let (trunk, width) = ModelTrunk::new(&mut store, state_dim + action_dim, shape, rng)?;
        let out = Linear::new(&mut store, "out", width, state_dim, 1.0, rng)?;
        let log_std = store.add("log_std", Tensor::zeros(&[1, state_dim]))?;
        Ok(DynamicsNet {
            store,
            trunk,
            out,
            log_std,
            state_dim,
            action_dim,
        })
    }

    /// Residual output `delta`, `[rows, |S|]`.
    pub fn residual(&self, g: &mut Graph, s: Var, a: Var) -> Result<Var> {
        check_cols(g, s, self.state_dim, "state")?;
        check_cols(g, a, self.action_dim, "action")?;
        let x = g.concat(&[s, a])?;
        let h = self.trunk.forward(g, &self.store, x)?;
        self.out.forward(g, &self.store, h)
    }

    /// Predicted next-state distribution with mean `s + delta`.
    pub fn forward(&self, g: &mut Graph, s: Var, a: Var) -> Result<GaussianVars> {
        let delta = self.residual(g, s, a)?;
        let mean = g.add(s, delta)?;
        let log_std = g.param(&self.store, self.log_std);
        Ok(GaussianVars { mean, log_std })
    }

    pub fn param_count(state_dim: usize, action_dim: usize, shape: MlpShape) -> usize {
        ModelTrunk::param_count(state_dim + action_dim, shape) + shape.hidden * state_dim + 2 * state_dim
    }
}

/// Reward model predicting the mean reward of `(s, a)`.
#[derive(Clone, Debug)]
pub struct RewardNet {
    pub store: ParamStore,
    trunk: ModelTrunk,
    out: Linear,
    log_std: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl RewardNet {
    pub fn new(state_dim: usize, action_dim: usize, shape: MlpShape, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let (trunk, width) = ModelTrunk::new(&mut store, state_dim + action_dim, shape, rng)?;
        let out = Linear::new(&mut store, "out", width, 1, 1.0, rng)?;
        let log_std = store.add("log_std", Tensor::zeros(&[1, 1]))?;
        Ok(RewardNet {
            store,
            trunk,
            out,
            log_std,
            state_dim,
            action_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: Var, a: Var) -> Result<GaussianVars> {
        check_cols(g, s, self.state_dim, "state")?;
        check_cols(g, a, self.action_dim, "action")?;
        let x = g.concat(&[s, a])?;
        let h = self.trunk.forward(g, &self.store, x)?;
        let mean = self.out.forward(g, &self.store, h)?;
        let log_std = g.param(&self.store, self.log_std);
        Ok(GaussianVars { mean, log_std })
    }

    pub fn param_count(state_dim: usize, action_dim: usize, shape: MlpShape) -> usize {
        ModelTrunk::param_count(state_dim + action_dim, shape) + shape.hidden + 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{max_rel_error, numeric_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    #[test]
    fn parameter_counts_match_architecture_tables() {
        let mut r = rng();
        let (s, a) = (17, 6);
        let d = DirectPolicyNet::new(s, a, MlpShape::POLICY, &mut r).unwrap();
        // 17*256+256 + 256*256+256 + 256*12+12
        assert_eq!(d.store.numel(), 4608 + 65792 + 3084);
        assert_eq!(d.store.numel(), DirectPolicyNet::param_count(s, a, MlpShape::POLICY));

        let it = IterativePolicyNet::new(s, a, MlpShape::POLICY, &mut r).unwrap();
        // norms 2*17 + 4*12; input 17 + 24 = 41
        assert_eq!(it.store.numel(), 34 + 48 + (41 * 256 + 256) + 65792 + (256 * 24 + 24));
        assert_eq!(it.store.numel(), IterativePolicyNet::param_count(s, a, MlpShape::POLICY));

        let qa = QNet::new(s, a, QArch::A, MlpShape::Q_A, &mut r).unwrap();
        assert_eq!(qa.store.numel(), (23 * 256 + 256) + 65792 + 257);
        assert_eq!(qa.store.numel(), QNet::param_count(s, a, QArch::A, MlpShape::Q_A));

        let qb = QNet::new(s, a, QArch::B, MlpShape::Q_B, &mut r).unwrap();
        let first = 3 * (23 * 512 + 512) + 2 * 512;
        let rest = 2 * (2 * (512 * 512 + 512) + 2 * 512);
        assert_eq!(qb.store.numel(), first + rest + 513);
        assert_eq!(qb.store.numel(), QNet::param_count(s, a, QArch::B, MlpShape::Q_B));

        let dy = DynamicsNet::new(s, a, MlpShape::MODEL, &mut r).unwrap();
        assert_eq!(dy.store.numel(), (23 * 256 + 3 * 256) + (256 * 256 + 3 * 256) + (256 * 17 + 17) + 17);
        assert_eq!(dy.store.numel(), DynamicsNet::param_count(s, a, MlpShape::MODEL));
        let rw = RewardNet::new(s, a, MlpShape::MODEL, &mut r).unwrap();
        assert_eq!(rw.store.numel(), RewardNet::param_count(s, a, MlpShape::MODEL));
    }

    #[test]
    fn zero_head_gives_standard_policy() {
        let mut net = DirectPolicyNet::new(3, 2, MlpShape { hidden: 16, layers: 2 }, &mut rng()).unwrap();
        net.zero_head();
        let p = net.direct_forward(&[0.3, -2.0, 5.0]).unwrap();
        assert_eq!(p.mu, vec![0.0, 0.0]);
        assert_eq!(p.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn direct_forward_deterministic_and_state_dependent() {
        let net = DirectPolicyNet::new(3, 2, MlpShape { hidden: 32, layers: 2 }, &mut rng()).unwrap();
        let a = net.direct_forward(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(a, net.direct_forward(&[0.1, 0.2, 0.3]).unwrap());
        let b = net.direct_forward(&[-1.0, 0.5, 2.0]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn iterative_gates_in_unit_interval() {
        let net = IterativePolicyNet::new(2, 2, MlpShape { hidden: 32, layers: 2 }, &mut rng()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s: Vec<f64> = (0..2).map(|_| r.random_range(-1e3..1e3)).collect();
            let lam = PolicyParams::from_log_sigma(
                vec![r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)],
                &[r.random_range(-3.0..2.0), r.random_range(-3.0..2.0)],
            )
            .unwrap();
            let grad: Vec<f64> = (0..4).map(|_| r.random_range(-1e3..1e3)).collect();
            let (delta, omega) = net.iterative_forward(&s, &lam, &grad).unwrap();
            assert!(omega.iter().all(|&w| w > 0.0 && w < 1.0));
            assert!(delta.iter().all(|d| d.is_finite()));
            let again = net.iterative_forward(&s, &lam, &grad).unwrap();
            assert_eq!((delta, omega), again);
        }
    }

    #[test]
    fn iterative_inputs_normalized_independently() {
        let net = IterativePolicyNet::new(2, 1, MlpShape { hidden: 16, layers: 2 }, &mut rng()).unwrap();
        // scaling one input by a positive constant leaves its normalization unchanged
        let lam = PolicyParams::from_log_sigma(vec![0.4], &[-0.2]).unwrap();
        let a = net.iterative_forward(&[1.0, 2.0], &lam, &[0.5, -0.1]).unwrap();
        let b = net.iterative_forward(&[1.0, 2.0], &lam, &[5.0, -1.0]).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-6);
        }
        // constant inputs normalize to zero, so any constant value gives the same output
        let c = net.iterative_forward(&[3.0, 3.0], &lam, &[0.5, -0.1]).unwrap();
        let d = net.iterative_forward(&[-7.0, -7.0], &lam, &[0.5, -0.1]).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn iterative_grad_input_receives_no_gradient() {
        let net = IterativePolicyNet::new(1, 2, MlpShape { hidden: 16, layers: 2 }, &mut rng()).unwrap();
        let mut g = Graph::new();
        let s = g.input(Tensor::row(vec![0.0]));
        let lam = g.leaf(Tensor::row(vec![0.1, -0.2, 0.0, 0.3]));
        let raw_grad = g.leaf(Tensor::row(vec![1.0, 2.0, -0.5, 0.1]));
        let grad = g.detach(raw_grad).unwrap();
        let u = net.forward(&mut g, s, lam, grad).unwrap();
        let loss = g.sum(u.delta).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(raw_grad).is_none());
        assert!(grads.get(lam).is_some());
    }

    #[test]
    fn highway_block_with_closed_gate_is_identity() {
        let net = QNet::new(2, 1, QArch::B, MlpShape { hidden: 8, layers: 3 }, &mut rng()).unwrap();
        let block = &net.highway_blocks()[1];
        let mut g = Graph::new();
        let x = g.input(Tensor::row((0..8).map(|i| i as f64 * 0.3 - 1.0).collect()));
        let y = block.forward(&mut g, &net.store, x, Some(0.0)).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn q_networks_deterministic_and_finite() {
        let mut r = rng();
        for arch in [QArch::A, QArch::B] {
            let net = QNet::new(3, 2, arch, MlpShape { hidden: 16, layers: 2 }, &mut r).unwrap();
            let v = net.q_forward(&[1e3, -1e3, 5.0], &[1.0, -1.0]).unwrap();
            assert!(v.is_finite());
            assert_eq!(v, net.q_forward(&[1e3, -1e3, 5.0], &[1.0, -1.0]).unwrap());
        }
    }

    /// Full-network gradient checks against central differences.
    #[test]
    fn network_gradients_match_finite_differences() {
        let mut r = rng();
        let shape = MlpShape { hidden: 12, layers: 2 };
        let nets: Vec<QNet> = [QArch::A, QArch::B]
            .iter()
            .map(|&arch| QNet::new(3, 2, arch, shape, &mut r).unwrap())
            .collect();
        for net in &nets {
            for _ in 0..20 {
                let s = Tensor::row((0..3).map(|_| r.random_range(-1.0..1.0)).collect());
                let a = Tensor::row((0..2).map(|_| r.random_range(-0.9..0.9)).collect());
                let f = |act: &Tensor| -> (f64, Tensor) {
                    let mut g = Graph::new();
                    let sv = g.input(s.clone());
                    let av = g.leaf(act.clone());
                    let q = net.forward(&mut g, sv, av).unwrap();
                    let grads = g.backward(q).unwrap();
                    (g.value(q).item(), grads.get_or_zeros(&g, av))
                };
                let (_, analytic) = f(&a);
                let numeric = numeric_grad(|t| f(t).0, &a, 1e-5);
                let err = max_rel_error(&analytic, &numeric, 1e-7);
                assert!(err < 1e-4, "{:?}: {err}", net.arch);
            }
        }
    }
}
