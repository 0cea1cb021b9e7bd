//! Parameter layout, forward pass and backpropagation for the archetypes.
//!
//! Every recurrent layer is a set of gate blocks, each holding `W` (input
//! weights), `U` (recurrent weights) and `b`. The blocks combine per cell:
//!
//! * rnn:  `h = tanh(Wx + Uh' + b)`
//! * lstm: gates i, f, g, o; `c = f*c' + i*g`, `h = o*tanh(c)`
//! * gru:  gates r, z, n; `n = tanh(W_n x + b_n + r*(U_n h'))`,
//!   `h = (1-z)*n + z*h'`
//!
//! A linear head maps the top hidden state to one output per step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Archetype;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub archetype: Archetype,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub lookback: usize,
}

impl Shape {
    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy)]
struct Gate {
    w: usize,
    u: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layer {
    d_in: usize,
    gates: Vec<Gate>,
}

#[derive(Debug, Clone)]
struct Layout {
    layers: Vec<Layer>,
    head_w: usize,
    head_b: usize,
    total: usize,
}

impl Layout {
    fn new(s: &Shape) -> Self {
        let h = s.hidden_dim;
        let mut at = 0;
        let mut layers = Vec::with_capacity(s.layers);
        for k in 0..s.layers {
            let d_in = match (k, s.archetype) {
                (0, Archetype::Mlp) => s.input_dim * s.lookback,
                (0, _) => s.input_dim,
                _ => h,
            };
            let recurrent = s.archetype != Archetype::Mlp;
            let gates = (0..s.archetype.gate_count())
                .map(|_| {
                    let w = at;
                    at += h * d_in;
                    let u = at;
                    if recurrent {
                        at += h * h;
                    }
                    let b = at;
                    at += h;
                    Gate { w, u, b }
                })
                .collect();
            layers.push(Layer { d_in, gates });
        }
        let head_w = at;
        let head_b = at + h;
        Self {
            layers,
            head_w,
            head_b,
            total: head_b + 1,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += M v` for row-major `M` (rows × v.len()).
fn mat_vec_add(params: &[f64], at: usize, rows: usize, v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &params[at + r * cols..at + (r + 1) * cols];
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `grad[M] += d ⊗ v` and `back += Mᵀ d`.
fn mat_vec_back(params: &[f64], grad: &mut [f64], at: usize, d: &[f64], v: &[f64], back: &mut [f64]) {
    let cols = v.len();
    for (r, dr) in d.iter().enumerate() {
        if *dr == 0.0 {
            continue;
        }
        let base = at + r * cols;
        for c in 0..cols {
            grad[base + c] += dr * v[c];
            back[c] += dr * params[base + c];
        }
    }
}

#[derive(Debug, Clone, Default)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    uh: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

/// Forward-pass record needed by backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    steps: Vec<Vec<StepCache>>,
    mlp: Vec<(Vec<f64>, Vec<f64>)>,
    top: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    shape: Shape,
    layout_total: usize,
    params: Vec<f64>,
}

impl Network {
    /// Uniform init in `±1/sqrt(fan_in)` per block.
    pub fn random(shape: Shape, rng: &mut impl Rng) -> Self {
        let layout = Layout::new(&shape);
        let mut params = vec![0.0; layout.total];
        let h = shape.hidden_dim;
        let mut fill = |from: usize, len: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[from..from + len] {
                *p = rng.random_range(-bound..=bound);
            }
        };
        for layer in &layout.layers {
            for g in &layer.gates {
                fill(g.w, h * layer.d_in, layer.d_in);
                if shape.archetype != Archetype::Mlp {
                    fill(g.u, h * h, h);
                }
                fill(g.b, h, layer.d_in);
            }
        }
        fill(layout.head_w, h + 1, h);
        Self {
            shape,
            layout_total: layout.total,
            params,
        }
    }

    pub fn from_params(shape: Shape, params: Vec<f64>) -> Option<Self> {
        let total = shape.param_count();
        (params.len() == total).then_some(Self {
            shape,
            layout_total: total,
            params,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout_total
    }

    /// Runs the network over `xs` (one input row per step). Recurrent nets
    /// emit one output per step; the MLP flattens exactly `lookback` rows
    /// into a single output.
    pub fn forward(&self, xs: &[Vec<f64>]) -> Trace {
        let layout = Layout::new(&self.shape);
        match self.shape.archetype {
            Archetype::Mlp => self.forward_mlp(&layout, xs),
            _ => self.forward_recurrent(&layout, xs),
        }
    }

    pub fn predict(&self, xs: &[Vec<f64>]) -> f64 {
        *self.forward(xs).outputs.last().expect("non-empty input")
    }

    fn head(&self, layout: &Layout, h: &[f64]) -> f64 {
        let w = &self.params[layout.head_w..layout.head_w + h.len()];
        w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + self.params[layout.head_b]
    }

    fn forward_mlp(&self, layout: &Layout, xs: &[Vec<f64>]) -> Trace {
        let hd = self.shape.hidden_dim;
        let mut a: Vec<f64> = xs.iter().flatten().copied().collect();
        let mut mlp = Vec::with_capacity(layout.layers.len());
        for layer in &layout.layers {
            let g = layer.gates[0];
            let mut z = self.params[g.b..g.b + hd].to_vec();
            mat_vec_add(&self.params, g.w, hd, &a, &mut z);
            let out: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
            mlp.push((a, out.clone()));
            a = out;
        }
        let y = self.head(layout, &a);
        Trace {
            steps: Vec::new(),
            mlp,
            top: vec![a],
            outputs: vec![y],
        }
    }

    fn forward_recurrent(&self, layout: &Layout, xs: &[Vec<f64>]) -> Trace {
        let hd = self.shape.hidden_dim;
        let arch = self.shape.archetype;
        let mut inputs: Vec<Vec<f64>> = xs.to_vec();
        let mut steps = Vec::with_capacity(layout.layers.len());
        for layer in &layout.layers {
            let mut h = vec![0.0; hd];
            let mut c = vec![0.0; hd];
            let mut caches = Vec::with_capacity(inputs.len());
            for x in &inputs {
                let mut wx = Vec::with_capacity(layer.gates.len());
                let mut uh = Vec::with_capacity(layer.gates.len());
                for g in &layer.gates {
                    let mut a = self.params[g.b..g.b + hd].to_vec();
                    mat_vec_add(&self.params, g.w, hd, x, &mut a);
                    wx.push(a);
                    let mut u = vec![0.0; hd];
                    mat_vec_add(&self.params, g.u, hd, &h, &mut u);
                    uh.push(u);
                }
                let mut cache = StepCache {
                    x: x.clone(),
                    h_prev: h.clone(),
                    c_prev: c.clone(),
                    ..Default::default()
                };
                let pre = |g: usize, j: usize| wx[g][j] + uh[g][j];
                match arch {
                    Archetype::Rnn => {
                        let a: Vec<f64> = (0..hd).map(|j| pre(0, j).tanh()).collect();
                        h = a.clone();
                        cache.act = vec![a];
                    }
                    Archetype::Lstm => {
                        let i: Vec<f64> = (0..hd).map(|j| sigmoid(pre(0, j))).collect();
                        let f: Vec<f64> = (0..hd).map(|j| sigmoid(pre(1, j))).collect();
                        let gg: Vec<f64> = (0..hd).map(|j| pre(2, j).tanh()).collect();
                        let o: Vec<f64> = (0..hd).map(|j| sigmoid(pre(3, j))).collect();
                        c = (0..hd).map(|j| f[j] * c[j] + i[j] * gg[j]).collect();
                        cache.tanh_c = c.iter().map(|v| v.tanh()).collect();
                        h = (0..hd).map(|j| o[j] * cache.tanh_c[j]).collect();
                        cache.act = vec![i, f, gg, o];
                    }
                    Archetype::Gru => {
                        let r: Vec<f64> = (0..hd).map(|j| sigmoid(pre(0, j))).collect();
                        let z: Vec<f64> = (0..hd).map(|j| sigmoid(pre(1, j))).collect();
                        let n: Vec<f64> = (0..hd).map(|j| (wx[2][j] + r[j] * uh[2][j]).tanh()).collect();
                        h = (0..hd).map(|j| (1.0 - z[j]) * n[j] + z[j] * h[j]).collect();
                        cache.act = vec![r, z, n];
                    }
                    Archetype::Mlp => unreachable!("mlp has no recurrent layers"),
                }
                cache.uh = uh;
                cache.h = h.clone();
                caches.push(cache);
            }
            inputs = caches.iter().map(|c| c.h.clone()).collect();
            steps.push(caches);
        }
        let outputs = inputs.iter().map(|h| self.head(layout, h)).collect();
        Trace {
            steps,
            mlp: Vec::new(),
            top: inputs,
            outputs,
        }
    }

    /// Gradient of `Σ_t d_out[t] * y_t` with respect to every parameter.
    pub fn backward(&self, trace: &Trace, d_out: &[f64]) -> Vec<f64> {
        let layout = Layout::new(&self.shape);
        let mut grad = vec![0.0; self.layout_total];
        let hd = self.shape.hidden_dim;
        let head_w = &self.params[layout.head_w..layout.head_w + hd];
        let mut d_top: Vec<Vec<f64>> = Vec::with_capacity(trace.top.len());
        for (t, h) in trace.top.iter().enumerate() {
            let d = d_out[t];
            for j in 0..hd {
                grad[layout.head_w + j] += d * h[j];
            }
            grad[layout.head_b] += d;
            d_top.push(head_w.iter().map(|w| w * d).collect());
        }
        match self.shape.archetype {
            Archetype::Mlp => self.backward_mlp(&layout, trace, d_top.pop().expect("one output"), &mut grad),
            _ => self.backward_recurrent(&layout, trace, d_top, &mut grad),
        }
        grad
    }

    fn backward_mlp(&self, layout: &Layout, trace: &Trace, mut d_a: Vec<f64>, grad: &mut [f64]) {
        for (layer, (input, out)) in layout.layers.iter().zip(&trace.mlp).rev() {
            let g = layer.gates[0];
            let dz: Vec<f64> = d_a.iter().zip(out).map(|(d, a)| d * (1.0 - a * a)).collect();
            for (j, v) in dz.iter().enumerate() {
                grad[g.b + j] += v;
            }
            let mut back = vec![0.0; input.len()];
            mat_vec_back(&self.params, grad, g.w, &dz, input, &mut back);
            d_a = back;
        }
    }

    fn backward_recurrent(&self, layout: &Layout, trace: &Trace, mut d_h_above: Vec<Vec<f64>>, grad: &mut [f64]) {
        let hd = self.shape.hidden_dim;
        for (layer, caches) in layout.layers.iter().zip(&trace.steps).rev() {
            let mut d_inputs = vec![vec![0.0; layer.d_in]; caches.len()];
            let mut dh_next = vec![0.0; hd];
            let mut dc_next = vec![0.0; hd];
            for t in (0..caches.len()).rev() {
                let s = &caches[t];
                let dh: Vec<f64> = (0..hd).map(|j| d_h_above[t][j] + dh_next[j]).collect();
                let mut dh_prev = vec![0.0; hd];
                // gradients of each gate's `Wx + b` and `Uh'` terms
                let (d_wx, d_uh): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match self.shape.archetype {
                    Archetype::Rnn => {
                        let a = &s.act[0];
                        let d: Vec<f64> = (0..hd).map(|j| dh[j] * (1.0 - a[j] * a[j])).collect();
                        (vec![d.clone()], vec![d])
                    }
                    Archetype::Lstm => {
                        let (i, f, g, o) = (&s.act[0], &s.act[1], &s.act[2], &s.act[3]);
                        let mut d = vec![vec![0.0; hd]; 4];
                        for j in 0..hd {
                            let tc = s.tanh_c[j];
                            let dc = dh[j] * o[j] * (1.0 - tc * tc) + dc_next[j];
                            d[0][j] = dc * g[j] * i[j] * (1.0 - i[j]);
                            d[1][j] = dc * s.c_prev[j] * f[j] * (1.0 - f[j]);
                            d[2][j] = dc * i[j] * (1.0 - g[j] * g[j]);
                            d[3][j] = dh[j] * tc * o[j] * (1.0 - o[j]);
                            dc_next[j] = dc * f[j];
                        }
                        (d.clone(), d)
                    }
                    Archetype::Gru => {
                        let (r, z, n) = (&s.act[0], &s.act[1], &s.act[2]);
                        let mut dx = vec![vec![0.0; hd]; 3];
                        let mut du = vec![vec![0.0; hd]; 3];
                        for j in 0..hd {
                            let dn = dh[j] * (1.0 - z[j]) * (1.0 - n[j] * n[j]);
                            let dz = dh[j] * (s.h_prev[j] - n[j]) * z[j] * (1.0 - z[j]);
                            let dr = dn * s.uh[2][j] * r[j] * (1.0 - r[j]);
                            dh_prev[j] += dh[j] * z[j];
                            dx[0][j] = dr;
                            du[0][j] = dr;
                            dx[1][j] = dz;
                            du[1][j] = dz;
                            dx[2][j] = dn;
                            du[2][j] = dn * r[j];
                        }
                        (dx, du)
                    }
                    Archetype::Mlp => unreachable!("mlp has no recurrent layers"),
                };
                for (g, gate) in layer.gates.iter().enumerate() {
                    for j in 0..hd {
                        grad[gate.b + j] += d_wx[g][j];
                    }
                    mat_vec_back(&self.params, grad, gate.w, &d_wx[g], &s.x, &mut d_inputs[t]);
                    mat_vec_back(&self.params, grad, gate.u, &d_uh[g], &s.h_prev, &mut dh_prev);
                }
                dh_next = dh_prev;
            }
            d_h_above = d_inputs;
        }
    }

    /// Squared error of the final-step output and its gradient.
    pub fn loss_and_gradient(&self, xs: &[Vec<f64>], target: f64) -> (f64, Vec<f64>) {
        let trace = self.forward(xs);
        let y = *trace.outputs.last().expect("non-empty input");
        let err = y - target;
        let mut d_out = vec![0.0; trace.outputs.len()];
        *d_out.last_mut().expect("non-empty") = 2.0 * err;
        (err * err, self.backward(&trace, &d_out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(archetype: Archetype, input_dim: usize, hidden_dim: usize, layers: usize, lookback: usize) -> Shape {
        Shape {
            archetype,
            input_dim,
            hidden_dim,
            layers,
            lookback,
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(shape(Archetype::Rnn, 1, 5, 1, 10).param_count(), 41);
        assert_eq!(shape(Archetype::Mlp, 1, 5, 1, 10).param_count(), 61);
        assert_eq!(shape(Archetype::Gru, 1, 5, 1, 10).param_count(), 3 * 35 + 6);
        assert_eq!(shape(Archetype::Lstm, 1, 5, 1, 10).param_count(), 4 * 35 + 6);
        assert_eq!(
            shape(Archetype::Rnn, 2, 3, 2, 4).param_count(),
            (6 + 9 + 3) + (9 + 9 + 3) + 4
        );
    }

    #[test]
    fn seeded_init_is_deterministic_and_bounded() {
        let s = shape(Archetype::Lstm, 2, 4, 2, 3);
        let a = Network::random(s, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Network::random(s, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.params().iter().all(|p| p.abs() <= 1.0 / 2f64.sqrt()));
    }

    fn rel_err(s: Shape, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::random(s, &mut rng);
        let xs: Vec<Vec<f64>> = (0..s.lookback)
            .map(|_| (0..s.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let target = rng.random_range(-1.0..1.0);
        let (_, analytic) = net.loss_and_gradient(&xs, target);
        let eps = 1e-6;
        let mut diff = 0.0;
        let mut norm: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let mut p = net.clone();
            p.params_mut()[i] += eps;
            let up = p.loss_and_gradient(&xs, target).0;
            p.params_mut()[i] -= 2.0 * eps;
            let down = p.loss_and_gradient(&xs, target).0;
            let numeric = (up - down) / (2.0 * eps);
            diff += (numeric - a).powi(2);
            norm = norm.max(numeric.abs()).max(a.abs());
        }
        diff.sqrt() / norm.max(1e-12)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for arch in Archetype::ALL {
            for seed in 0..5 {
                let e = rel_err(shape(arch, 2, 3, 2, 4), seed);
                assert!(e < 1e-6, "{arch:?} seed {seed}: {e}");
            }
        }
    }

    #[test]
    fn recurrent_nets_emit_one_output_per_step() {
        let net = Network::random(shape(Archetype::Gru, 1, 3, 1, 4), &mut ChaCha8Rng::seed_from_u64(1));
        let xs = vec![vec![0.5]; 7];
        assert_eq!(net.forward(&xs).outputs.len(), 7);
        assert_eq!(net.predict(&xs[..4]), net.forward(&xs[..4]).outputs[3]);
    }
}
