//! Small feed-forward networks with hand-written backpropagation, plus the
//! losses used for supervised and actor-critic training.
//!
//! Hidden layers use `tanh`; the output layer is linear. Weights are stored
//! row-major as `outputs x inputs`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AURLNET\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub layers: Vec<Layer>,
}

/// Post-activation values of every layer; `values[0]` is the input.
#[derive(Debug, Clone)]
pub struct Activations {
    pub values: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("at least the input")
    }

    /// Activation of the last hidden layer (the input for a 1-layer net).
    pub fn last_hidden(&self) -> &[f64] {
        &self.values[self.values.len().saturating_sub(2)]
    }
}

impl Net {
    /// Xavier-uniform weights, zero biases.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(dims);
        for layer in &mut net.layers {
            let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-bound..bound);
            }
        }
        net
    }

    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "a net needs input and output dims");
        assert!(dims.iter().all(|&d| d > 0), "layer dims must be positive");
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                inputs: w[0],
                outputs: w[1],
                weights: vec![0.0; w[0] * w[1]],
                biases: vec![0.0; w[1]],
            })
            .collect();
        Self { layers }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weights.iter_mut().for_each(|w| *w = 0.0);
            last.biases.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Flat view of every parameter in layer order (weights then biases).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return &mut l.biases[index];
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|x| x.is_finite()))
    }

    /// FNV-1a over the parameter bit patterns; used to check frozen nets.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in self.params() {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.values.pop().unwrap_or_default())
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<Activations> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: input.len(),
                context: "net input",
            });
        }
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let x = values.last().expect("non-empty");
            let mut y = layer.biases.clone();
            for (o, out) in y.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                *out += dot(row, x);
            }
            if i != last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            values.push(y);
        }
        Ok(Activations { values })
    }

    /// Gradients of a scalar loss with respect to every parameter and the
    /// input, given `upstream = dL/d(output)`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(GradientTape, Vec<f64>)> {
        let acts = self.forward_cached(input)?;
        let mut tape = GradientTape::zeros_like(self);
        let input_grad = self.backward_into(&acts, upstream, &mut tape)?;
        Ok((tape, input_grad))
    }

    /// Accumulates parameter gradients into `tape` and returns dL/d(input).
    pub fn backward_into(
        &self,
        acts: &Activations,
        upstream: &[f64],
        tape: &mut GradientTape,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension {
                expected: self.output_dim(),
                got: upstream.len(),
                context: "upstream gradient",
            });
        }
        let mut delta = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let x = &acts.values[i];
            let gw = &mut tape.weights[i];
            let gb = &mut tape.biases[i];
            let mut dx = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = o * layer.inputs;
                let w = &layer.weights[row..row + layer.inputs];
                let g = &mut gw[row..row + layer.inputs];
                for j in 0..layer.inputs {
                    g[j] += d * x[j];
                    dx[j] += d * w[j];
                }
            }
            if i > 0 {
                // x is tanh output of the previous layer
                for (d, &a) in dx.iter_mut().zip(x) {
                    *d *= 1.0 - a * a;
                }
            }
            delta = dx;
        }
        Ok(delta)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let dims = self.layer_dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for x in self.params() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != MAGIC {
            return Err("bad magic".into());
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let n = read_u32(r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(format!("implausible layer count {n}"));
        }
        let dims: Vec<usize> = (0..n)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<std::result::Result<_, _>>()?;
        if dims.iter().any(|&d| d == 0 || d > 1 << 20) {
            return Err("implausible layer dims".into());
        }
        let mut net = Net::zeros(&dims);
        let mut buf = [0u8; 8];
        for i in 0..net.param_count() {
            r.read_exact(&mut buf).map_err(|e| e.to_string())?;
            let x = f64::from_le_bytes(buf);
            if !x.is_finite() {
                return Err("non-finite parameter".into());
            }
            *net.param_mut(i) = x;
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Net::read_from(&mut std::io::BufReader::new(file)).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

fn read_u32(r: &mut impl Read) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| e.to_string())?;
    Ok(u32::from_le_bytes(b))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient storage congruent with a [`Net`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientTape {
    pub fn zeros_like(net: &Net) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.biases.len()])
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        self.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn scale(&mut self, k: f64) {
        self.iter_mut().for_each(|g| *g *= k);
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|&g| g == 0.0)
    }

    fn congruent(&self, net: &Net) -> bool {
        self.weights.len() == net.layers.len()
            && net
                .layers
                .iter()
                .zip(self.weights.iter().zip(&self.biases))
                .all(|(l, (w, b))| l.weights.len() == w.len() && l.biases.len() == b.len())
    }
}

/// Adam moments and settings for one net.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub step: u64,
    m: GradientTape,
    v: GradientTape,
}

impl OptimizerState {
    pub fn new(net: &Net, learning_rate: f64, clip_norm: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm,
            step: 0,
            m: GradientTape::zeros_like(net),
            v: GradientTape::zeros_like(net),
        }
    }
}

/// One Adam step with global-norm clipping. Returns the pre-clip norm.
pub fn apply_gradients(
    net: &mut Net,
    tape: &GradientTape,
    opt: &mut OptimizerState,
) -> Result<f64> {
    if !tape.congruent(net) || !opt.m.congruent(net) {
        return Err(Error::Dimension {
            expected: net.param_count(),
            got: tape.iter().count(),
            context: "gradient tape",
        });
    }
    let norm = tape.global_norm();
    if !norm.is_finite() {
        return Err(Error::Training("non-finite gradient".into()));
    }
    let scale = if norm > opt.clip_norm && opt.clip_norm > 0.0 {
        opt.clip_norm / norm
    } else {
        1.0
    };
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let params = layer.weights.iter_mut().chain(layer.biases.iter_mut());
        let grads = tape.weights[i].iter().chain(&tape.biases[i]);
        let ms = opt.m.weights[i]
            .iter_mut()
            .chain(opt.m.biases[i].iter_mut());
        let vs = opt.v.weights[i]
            .iter_mut()
            .chain(opt.v.biases[i].iter_mut());
        for (((p, &g), m), v) in params.zip(grads).zip(ms).zip(vs) {
            let g = g * scale;
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= opt.learning_rate * mhat / (vhat.sqrt() + opt.epsilon);
        }
    }
    if !net.is_finite() {
        return Err(Error::Training("parameters became non-finite".into()));
    }
    Ok(norm)
}

/// Clipping factor alone, for inspection and tests.
pub fn clip_scale(norm: f64, clip_norm: f64) -> f64 {
    if norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    }
}

/// Probabilities are floored at the smallest normal `f64`, so every entry
/// stays strictly positive even when the logits span more than `exp` can
/// represent.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter()
        .map(|e| (e / z).max(f64::MIN_POSITIVE))
        .collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(())
}

/// Draws an index from `softmax(logits)` and returns its exact log-probability.
pub fn softmax_sample(logits: &[f64], rng: &mut impl Rng) -> Result<(usize, f64)> {
    check_finite(logits)?;
    let logp = log_softmax(logits);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut chosen = logits.len() - 1;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            chosen = i;
            break;
        }
    }
    Ok((chosen, logp[chosen]))
}

/// Greedy counterpart of [`softmax_sample`].
pub fn softmax_argmax(logits: &[f64]) -> Result<(usize, f64)> {
    check_finite(logits)?;
    let i = argmax(logits);
    Ok((i, log_softmax(logits)[i]))
}

/// `-log softmax(logits)[target]` and its gradient `softmax - onehot`.
pub fn cross_entropy_loss_grad(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::InvalidLabel {
            index: target,
            size: logits.len(),
        });
    }
    check_finite(logits)?;
    let logp = log_softmax(logits);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[target] -= 1.0;
    Ok((-logp[target], grad))
}

/// Gradient of `log softmax(logits)[index]` with respect to the logits.
pub fn log_prob_grad(logits: &[f64], index: usize) -> Vec<f64> {
    let mut g: Vec<f64> = softmax(logits).into_iter().map(|p| -p).collect();
    g[index] += 1.0;
    g
}

pub fn td_target(reward: f64, gamma: f64, v_next: f64, is_terminal: bool) -> f64 {
    reward + if is_terminal { 0.0 } else { gamma * v_next }
}

/// Squared TD error and its gradient with respect to `v_curr`. The target is
/// a constant.
pub fn critic_loss_grad(
    reward: f64,
    gamma: f64,
    v_next: f64,
    v_curr: f64,
    is_terminal: bool,
) -> (f64, f64) {
    let delta = td_target(reward, gamma, v_next, is_terminal) - v_curr;
    (delta * delta, -2.0 * delta)
}

pub fn advantage(reward: f64, gamma: f64, v_next: f64, v_curr: f64, is_terminal: bool) -> f64 {
    td_target(reward, gamma, v_next, is_terminal) - v_curr
}

/// The actor objective `A * (log p(a) + log p(s))`, to be ascended. `coef` is
/// the constant that multiplies each log-probability's gradient in the loss
/// being minimized (`-A`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyObjective {
    pub objective: f64,
    pub coef: f64,
}

pub fn policy_loss_grad(advantage: f64, logp_action: f64, logp_slot: f64) -> PolicyObjective {
    PolicyObjective {
        objective: advantage * (logp_action + logp_slot),
        coef: -advantage,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_net_gives_zero_output() {
        let net = Net::zeros(&[4, 6, 3]);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_single_layer() {
        let mut net = Net::zeros(&[3, 3]);
        for i in 0..3 {
            net.layers[0].weights[i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.2, 7.0];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = Net::zeros(&[3, 2]);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { .. })));
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn forward_matches_hand_arithmetic() {
        let net = Net::new(&[3, 4, 2], &mut rng(11));
        let x = [0.5, -0.25, 1.5];
        // independent evaluation
        let l0 = &net.layers[0];
        let h: Vec<f64> = (0..4)
            .map(|o| {
                let mut s = l0.biases[o];
                for j in 0..3 {
                    s += l0.weights[o * 3 + j] * x[j];
                }
                s.tanh()
            })
            .collect();
        let l1 = &net.layers[1];
        let y: Vec<f64> = (0..2)
            .map(|o| {
                let mut s = l1.biases[o];
                for j in 0..4 {
                    s += l1.weights[o * 4 + j] * h[j];
                }
                s
            })
            .collect();
        let out = net.forward(&x).unwrap();
        for (a, b) in out.iter().zip(&y) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_tape() {
        let net = Net::new(&[3, 5, 2], &mut rng(1));
        let (tape, dx) = net.backward(&[1.0, 2.0, 3.0], &[0.0, 0.0]).unwrap();
        assert!(tape.is_zero());
        assert!(dx.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn output_bias_gradient_is_upstream() {
        let net = Net::new(&[3, 5, 2], &mut rng(2));
        let up = [0.7, -1.3];
        let (tape, _) = net.backward(&[0.1, 0.2, 0.3], &up).unwrap();
        assert_eq!(tape.biases[1], up.to_vec());
    }

    /// Central finite differences of `loss(net(x))` for `loss = w . y`.
    fn fd_check(dims: &[usize], seed: u64) {
        let mut r = rng(seed);
        let mut net = Net::new(dims, &mut r);
        let x: Vec<f64> = (0..dims[0]).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..*dims.last().unwrap())
            .map(|_| r.gen_range(-1.0..1.0))
            .collect();
        let loss = |n: &Net, x: &[f64]| dot(&n.forward(x).unwrap(), &w);
        let (tape, dx) = net.backward(&x, &w).unwrap();
        let analytic: Vec<f64> = tape.iter().copied().collect();
        let h = 1e-5;
        for i in 0..net.param_count() {
            let orig = *net.param_mut(i);
            *net.param_mut(i) = orig + h;
            let up = loss(&net, &x);
            *net.param_mut(i) = orig - h;
            let down = loss(&net, &x);
            *net.param_mut(i) = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - analytic[i]).abs();
            let tol = 1e-4 * numeric.abs().max(analytic[i].abs()).max(1e-2);
            assert!(
                err <= tol.max(1e-6),
                "param {i}: {numeric} vs {}",
                analytic[i]
            );
        }
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let numeric = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!((numeric - dx[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(&[4, 6, 3], 3);
        fd_check(&[5, 8, 8, 4], 4);
        fd_check(&[2, 1], 5);
    }

    #[test]
    fn softmax_sample_uniform() {
        let mut r = rng(7);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[softmax_sample(&[0.3; 4], &mut r).unwrap().0] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() <= 0.01);
        }
    }

    #[test]
    fn softmax_sample_saturates() {
        let p = softmax(&[50.0, -50.0]);
        assert!(p[0] >= 1.0 - 1e-9);
        let mut r = rng(8);
        for _ in 0..1000 {
            assert_eq!(softmax_sample(&[50.0, -50.0], &mut r).unwrap().0, 0);
        }
    }

    #[test]
    fn softmax_sample_returns_exact_logp() {
        let logits = [0.2, 1.7, -0.4];
        let (i, lp) = softmax_sample(&logits, &mut rng(9)).unwrap();
        assert!((lp - softmax(&logits)[i].ln()).abs() < 1e-12);
        assert!(softmax_sample(&[f64::NAN, 0.0], &mut rng(9)).is_err());
    }

    #[test]
    fn softmax_is_normalized_for_huge_logits() {
        for logits in [vec![1e3, -1e3, 0.0], vec![-1e3; 5], vec![3.0, 2.0, 1.0]] {
            let p = softmax(&logits);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let (loss, _) = cross_entropy_loss_grad(&[100.0, -100.0, -100.0], 0).unwrap();
        assert!(loss < 1e-12);
        let (loss, _) = cross_entropy_loss_grad(&[0.0; 5], 2).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy_loss_grad(&[0.0; 3], 3),
            Err(Error::InvalidLabel { .. })
        ));
    }

    #[test]
    fn cross_entropy_grad_matches_fd() {
        let logits = [0.3, -1.1, 2.0, 0.5];
        let (_, g) = cross_entropy_loss_grad(&logits, 2).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            let mut p = logits;
            p[i] += h;
            let mut m = logits;
            m[i] -= h;
            let num = (cross_entropy_loss_grad(&p, 2).unwrap().0
                - cross_entropy_loss_grad(&m, 2).unwrap().0)
                / (2.0 * h);
            assert!((num - g[i]).abs() <= 1e-4 * num.abs().max(1e-2));
        }
    }

    #[test]
    fn critic_and_advantage_values() {
        let (loss, _) = critic_loss_grad(2.0, 0.99, 123.0, 1.5, true);
        assert!((loss - 0.25).abs() < 1e-12);
        assert_eq!(critic_loss_grad(0.0, 0.99, 0.0, 0.0, false), (0.0, -0.0));
        assert_eq!(advantage(0.0, 0.99, 0.0, 0.0, false), 0.0);
        assert_eq!(advantage(2.0, 0.99, 5.0, 0.0, true), 2.0);
        assert!((advantage(-0.05, 0.99, 1.0, 1.0, false) - (-0.06)).abs() < 1e-12);
    }

    #[test]
    fn critic_grad_matches_fd() {
        let (r, g, vn, vc) = (0.4, 0.9, 0.7, -0.2);
        let (_, grad) = critic_loss_grad(r, g, vn, vc, false);
        let h = 1e-5;
        let num = (critic_loss_grad(r, g, vn, vc + h, false).0
            - critic_loss_grad(r, g, vn, vc - h, false).0)
            / (2.0 * h);
        assert!((num - grad).abs() <= 1e-4 * num.abs());
    }

    #[test]
    fn critic_loss_zero_iff_on_target() {
        let target = td_target(0.3, 0.99, 1.2, false);
        assert_eq!(critic_loss_grad(0.3, 0.99, 1.2, target, false).0, 0.0);
        assert!(critic_loss_grad(0.3, 0.99, 1.2, target + 1e-3, false).0 > 0.0);
    }

    #[test]
    fn zero_advantage_zero_gradient() {
        let obj = policy_loss_grad(0.0, -0.7, -1.2);
        assert_eq!(obj.coef, 0.0);
        assert_eq!(obj.objective, 0.0);
    }

    fn one_policy_step(adv: f64) -> (f64, f64, f64, f64) {
        let mut net = Net::new(&[3, 8, 5], &mut rng(21));
        let mut opt = OptimizerState::new(&net, 1e-2, 5.0);
        let x = [0.2, -0.4, 0.9];
        let (a, s) = (1usize, 3usize);
        let logp = |n: &Net| {
            let y = n.forward(&x).unwrap();
            (log_softmax(&y[..3])[a], log_softmax(&y[3..])[s - 3])
        };
        let (la0, ls0) = logp(&net);
        let obj = policy_loss_grad(adv, la0, ls0);
        let y = net.forward(&x).unwrap();
        let mut up = vec![0.0; 5];
        for (i, g) in log_prob_grad(&y[..3], a).into_iter().enumerate() {
            up[i] = obj.coef * g;
        }
        for (i, g) in log_prob_grad(&y[3..], s - 3).into_iter().enumerate() {
            up[3 + i] = obj.coef * g;
        }
        let (tape, _) = net.backward(&x, &up).unwrap();
        apply_gradients(&mut net, &tape, &mut opt).unwrap();
        let (la1, ls1) = logp(&net);
        (la0, ls0, la1, ls1)
    }

    #[test]
    fn positive_advantage_raises_log_probs() {
        let (la0, ls0, la1, ls1) = one_policy_step(1.0);
        assert!(la1 > la0 && ls1 > ls0);
    }

    #[test]
    fn negative_advantage_lowers_log_probs() {
        let (la0, ls0, la1, ls1) = one_policy_step(-1.0);
        assert!(la1 < la0 && ls1 < ls0);
    }

    #[test]
    fn zero_tape_leaves_params() {
        let mut net = Net::new(&[3, 4, 2], &mut rng(1));
        let before = net.clone();
        let mut opt = OptimizerState::new(&net, 1e-3, 5.0);
        let tape = GradientTape::zeros_like(&net);
        apply_gradients(&mut net, &tape, &mut opt).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn descent_on_a_bowl() {
        let mut net = Net::new(&[2, 3], &mut rng(5));
        let mut opt = OptimizerState::new(&net, 1e-2, 5.0);
        let norm = |n: &Net| n.params().iter().map(|p| p * p).sum::<f64>().sqrt();
        let before = norm(&net);
        let mut tape = GradientTape::zeros_like(&net);
        for (g, p) in tape.iter_mut().zip(net.params()) {
            *g = 2.0 * p;
        }
        apply_gradients(&mut net, &tape, &mut opt).unwrap();
        assert!(norm(&net) < before);
    }

    #[test]
    fn clipping_to_five() {
        // One parameter, gradient 50: after clipping the first Adam moment is
        // (1 - beta1) * 5 = 0.5.
        let mut net = Net::zeros(&[1, 1]);
        let mut opt = OptimizerState::new(&net, 1e-3, 5.0);
        let mut tape = GradientTape::zeros_like(&net);
        tape.weights[0][0] = 30.0;
        tape.biases[0][0] = 40.0;
        let norm = apply_gradients(&mut net, &tape, &mut opt).unwrap();
        assert_eq!(norm, 50.0);
        assert!((opt.m.weights[0][0] - 0.1 * 3.0).abs() < 1e-12);
        assert!((opt.m.biases[0][0] - 0.1 * 4.0).abs() < 1e-12);
        assert_eq!(clip_scale(50.0, 5.0), 0.1);
        assert_eq!(clip_scale(2.0, 5.0), 1.0);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut net = Net::zeros(&[1, 1]);
        let mut opt = OptimizerState::new(&net, 1e-3, 5.0);
        let mut tape = GradientTape::zeros_like(&net);
        tape.weights[0][0] = f64::NAN;
        assert!(matches!(
            apply_gradients(&mut net, &tape, &mut opt),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_rejects_garbage() {
        let net = Net::new(&[5, 7, 3], &mut rng(3));
        let mut bytes = Vec::new();
        net.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len(), 8 + 4 + 4 + 3 * 4 + net.param_count() * 8);
        let back = Net::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, net);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Net::read_from(&mut bad.as_slice()).is_err());
        assert!(Net::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
    }
}
