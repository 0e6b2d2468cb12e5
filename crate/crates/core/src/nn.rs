//! Dense SiLU networks with hand-written reverse mode, Adam, and a
//! power-function EMA of the weights.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{sigmoid, Rng};

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

/// Multilayer perceptron with SiLU between layers and a linear output.
///
/// The last `flags` input columns are binary indicators. When `emb > 0` they
/// are also embedded linearly into `emb` features that are added to the first
/// `emb` inputs of every hidden-to-hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    widths: Vec<usize>,
    flags: usize,
    emb: usize,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass for use in [`DenseNet::backward`].
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    /// SiLU derivative at each hidden pre-activation.
    slope: Vec<Array2<f64>>,
    flag_cols: Option<Array2<f64>>,
}

impl DenseNet {
    /// Zero-initialized network.
    pub fn zeros(widths: &[usize], flags: usize, emb: usize) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|w| *w == 0) {
            return Err(Error::invalid("network needs at least two positive widths"));
        }
        if flags > widths[0] {
            return Err(Error::invalid("more flag columns than inputs"));
        }
        if emb > 0 && (flags == 0 || widths.len() < 4 || widths[1..widths.len() - 1].iter().any(|h| *h < emb)) {
            return Err(Error::invalid("flag embedding needs flags and hidden layers at least as wide"));
        }
        let mut net = Self {
            widths: widths.to_vec(),
            flags,
            emb,
            params: Vec::new(),
        };
        net.params = vec![0.0; net.param_count()];
        Ok(net)
    }

    /// Weights drawn from N(0, 1/fan_in), zero biases.
    pub fn init(widths: &[usize], flags: usize, emb: usize, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(widths, flags, emb)?;
        for l in 0..net.n_layers() {
            let (fan_in, fan_out) = (net.widths[l], net.widths[l + 1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            let off = net.weight_offset(l);
            for p in &mut net.params[off..off + fan_in * fan_out] {
                let z: f64 = StandardNormal.sample(rng);
                *p = std * z;
            }
        }
        if emb > 0 {
            let off = net.embedding_offset();
            let std = 1.0 / (flags as f64).sqrt();
            for p in &mut net.params[off..off + flags * emb] {
                let z: f64 = StandardNormal.sample(rng);
                *p = std * z;
            }
        }
        Ok(net)
    }

    pub fn from_params(widths: &[usize], flags: usize, emb: usize, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(widths, flags, emb)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn flags(&self) -> usize {
        self.flags
    }

    pub fn emb(&self) -> usize {
        self.emb
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        let layers: usize = (0..self.n_layers())
            .map(|l| (self.widths[l] + 1) * self.widths[l + 1])
            .sum();
        layers + (self.flags + 1) * self.emb
    }

    fn weight_offset(&self, l: usize) -> usize {
        (0..l).map(|k| (self.widths[k] + 1) * self.widths[k + 1]).sum()
    }

    fn bias_offset(&self, l: usize) -> usize {
        self.weight_offset(l) + self.widths[l] * self.widths[l + 1]
    }

    fn embedding_offset(&self) -> usize {
        self.weight_offset(self.n_layers())
    }

    fn has_skip(&self, l: usize) -> bool {
        self.emb > 0 && l >= 1 && l + 1 < self.n_layers()
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let off = self.weight_offset(l);
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        ArrayView2::from_shape((i, o), &self.params[off..off + i * o]).expect("layout")
    }

    fn bias(&self, l: usize) -> &[f64] {
        let off = self.bias_offset(l);
        &self.params[off..off + self.widths[l + 1]]
    }

    fn embedding(&self) -> (ArrayView2<'_, f64>, &[f64]) {
        let off = self.embedding_offset();
        let n = self.flags * self.emb;
        (
            ArrayView2::from_shape((self.flags, self.emb), &self.params[off..off + n]).expect("layout"),
            &self.params[off + n..off + n + self.emb],
        )
    }

    /// Forward pass of one input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass of a batch, one input per row.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.run(x, false).map(|(out, _)| out)
    }

    /// Forward pass that records what [`Self::backward`] needs.
    pub fn forward_tape(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        self.run(x, true).map(|(out, tape)| (out, tape.expect("recorded")))
    }

    fn run(&self, x: ArrayView2<'_, f64>, record: bool) -> Result<(Array2<f64>, Option<Tape>)> {
        if x.ncols() != self.input_width() {
            return Err(Error::Shape {
                expected: self.input_width(),
                got: x.ncols(),
            });
        }
        let b = x.nrows();
        let embedded = if self.emb > 0 {
            let flag_cols = x.slice(s![.., self.input_width() - self.flags..]).to_owned();
            let (we, be) = self.embedding();
            let mut e = Array2::zeros((b, self.emb));
            for mut row in e.rows_mut() {
                row.assign(&ndarray::ArrayView1::from(be));
            }
            general_mat_mul(1.0, &flag_cols, &we, 1.0, &mut e);
            Some((flag_cols, e))
        } else {
            None
        };
        let mut inputs = Vec::new();
        let mut slope = Vec::new();
        let mut a = x.to_owned();
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            if self.has_skip(l) {
                let e = &embedded.as_ref().expect("embedding").1;
                let mut head = a.slice_mut(s![.., ..self.emb]);
                head += e;
            }
            let mut z = Array2::zeros((b, self.widths[l + 1]));
            let bias = ndarray::ArrayView1::from(self.bias(l));
            for mut row in z.rows_mut() {
                row.assign(&bias);
            }
            general_mat_mul(1.0, &a, &self.weight(l), 1.0, &mut z);
            if l == last {
                if record {
                    inputs.push(a);
                }
                a = z;
            } else if record {
                let mut dz = Array2::zeros(z.raw_dim());
                ndarray::Zip::from(&mut z).and(&mut dz).for_each(|v, g| {
                    let sg = sigmoid(*v);
                    *g = sg * (1.0 + *v * (1.0 - sg));
                    *v *= sg;
                });
                inputs.push(a);
                slope.push(dz);
                a = z;
            } else {
                z.mapv_inplace(silu);
                a = z;
            }
        }
        let tape = record.then(|| Tape {
            inputs,
            slope,
            flag_cols: embedded.map(|(f, _)| f),
        });
        Ok((a, tape))
    }

    /// Reverse pass: accumulate `dL/dθ` into `grad` (same layout as the
    /// parameters) and return `dL/dinput`, given `d_out = dL/doutput`.
    pub fn backward(&self, tape: &Tape, d_out: ArrayView2<'_, f64>, grad: &mut [f64]) -> Result<Array2<f64>> {
        if grad.len() != self.params.len() {
            return Err(Error::Shape {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let b = tape.inputs[0].nrows();
        if d_out.dim() != (b, self.output_width()) {
            return Err(Error::Shape {
                expected: self.output_width(),
                got: d_out.ncols(),
            });
        }
        let last = self.n_layers() - 1;
        let mut d_emb = (self.emb > 0).then(|| Array2::<f64>::zeros((b, self.emb)));
        let mut da = d_out.to_owned();
        for l in (0..=last).rev() {
            let dz = if l == last {
                da
            } else {
                let mut dz = da;
                dz *= &tape.slope[l];
                dz
            };
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let w_off = self.weight_offset(l);
            {
                let mut gw = ArrayViewMut2::from_shape((i, o), &mut grad[w_off..w_off + i * o]).expect("layout");
                general_mat_mul(1.0, &tape.inputs[l].t(), &dz, 1.0, &mut gw);
            }
            let b_off = self.bias_offset(l);
            for (g, v) in grad[b_off..b_off + o].iter_mut().zip(dz.sum_axis(Axis(0)).iter()) {
                *g += v;
            }
            let mut din = Array2::zeros((b, i));
            general_mat_mul(1.0, &dz, &self.weight(l).t(), 0.0, &mut din);
            if self.has_skip(l) {
                let de = d_emb.as_mut().expect("embedding");
                *de += &din.slice(s![.., ..self.emb]);
            }
            da = din;
        }
        if let Some(de) = d_emb {
            let flag_cols = tape.flag_cols.as_ref().expect("flags recorded");
            let off = self.embedding_offset();
            let n = self.flags * self.emb;
            {
                let mut gw = ArrayViewMut2::from_shape((self.flags, self.emb), &mut grad[off..off + n]).expect("layout");
                general_mat_mul(1.0, &flag_cols.t(), &de, 1.0, &mut gw);
            }
            for (g, v) in grad[off + n..off + n + self.emb].iter_mut().zip(de.sum_axis(Axis(0)).iter()) {
                *g += v;
            }
            let (we, _) = self.embedding();
            let start = self.input_width() - self.flags;
            let mut tail = da.slice_mut(s![.., start..]);
            general_mat_mul(1.0, &de, &we.t(), 1.0, &mut tail);
        }
        Ok(da)
    }
}

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    /// `α_ref / sqrt(max(iter / iter_ref, 1))`
    #[default]
    InverseSqrt,
    /// `α_ref / max(iter, iter_ref, 1)`
    Literal,
}

/// How weight decay enters the Adam update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightDecayMode {
    /// `θ ← θ (1 − α wd)` after the Adam step.
    #[default]
    Decoupled,
    /// `wd θ` added to the gradient before the moment updates, so the decay
    /// is rescaled by the adaptive step size.
    Coupled,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub alpha_ref: f64,
    pub iter_ref: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: usize,
}

impl Adam {
    pub fn new(n_params: usize, alpha_ref: f64, iter_ref: usize) -> Self {
        Self {
            alpha_ref,
            iter_ref,
            schedule: LrSchedule::InverseSqrt,
            weight_decay: 0.0,
            decay_mode: WeightDecayMode::Decoupled,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn learning_rate(&self, iter: usize) -> f64 {
        match self.schedule {
            LrSchedule::InverseSqrt => {
                let ratio = iter as f64 / self.iter_ref.max(1) as f64;
                self.alpha_ref / ratio.max(1.0).sqrt()
            }
            LrSchedule::Literal => self.alpha_ref / iter.max(self.iter_ref).max(1) as f64,
        }
    }

    /// One update at iteration `iter` (1-based).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], iter: usize) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training {
                iteration: iter,
                reason: format!("non-finite gradient at parameter {i}"),
            });
        }
        self.steps += 1;
        let lr = self.learning_rate(iter.max(1));
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        let coupled = self.decay_mode == WeightDecayMode::Coupled;
        for i in 0..params.len() {
            let g = if coupled {
                grads[i] + self.weight_decay * params[i]
            } else {
                grads[i]
            };
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            if !coupled {
                params[i] *= 1.0 - lr * self.weight_decay;
            }
        }
        Ok(())
    }
}

/// Exponent `γ` of the power-function averaging profile with relative
/// standard deviation `sigma_rel`, from `(γ+1) / ((γ+2)^2 (γ+3)) = σ_rel^2`.
pub fn power_ema_gamma(sigma_rel: f64) -> f64 {
    assert!(sigma_rel > 0.0 && sigma_rel < 0.28, "σ_rel out of range");
    let target = sigma_rel * sigma_rel;
    let f = |g: f64| (g + 1.0) / ((g + 2.0).powi(2) * (g + 3.0));
    // f decreases on [0, ∞).
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while f(hi) > target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Shadow copy of the parameters averaged with a power-function profile.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub sigma_rel: f64,
    gamma: f64,
    shadow: Vec<f64>,
}

impl Ema {
    pub fn new(params: &[f64], sigma_rel: f64) -> Self {
        Self {
            sigma_rel,
            gamma: power_ema_gamma(sigma_rel),
            shadow: params.to_vec(),
        }
    }

    pub fn from_shadow(shadow: Vec<f64>, sigma_rel: f64) -> Self {
        Self {
            sigma_rel,
            gamma: power_ema_gamma(sigma_rel),
            shadow,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn beta(&self, step: usize) -> f64 {
        (1.0 - 1.0 / step.max(1) as f64).powf(self.gamma + 1.0)
    }

    /// Fold the parameters after optimizer step `step` (1-based) into the shadow.
    pub fn update(&mut self, params: &[f64], step: usize) {
        let beta = self.beta(step);
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = (1.0 - beta) * p + beta * *s;
        }
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }
}

const MAGIC: &[u8; 8] = b"BLFNET\0\0";
const FORMAT_VERSION: u32 = 1;

/// Binary checkpoint: tag, architecture, parameters and optional EMA shadow.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub net: DenseNet,
    pub ema: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.net;
        let mut out = Vec::with_capacity(64 + 16 * net.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&(net.widths.len() as u32).to_le_bytes());
        for w in &net.widths {
            out.extend_from_slice(&(*w as u64).to_le_bytes());
        }
        out.extend_from_slice(&(net.flags as u64).to_le_bytes());
        out.extend_from_slice(&(net.emb as u64).to_le_bytes());
        out.extend_from_slice(&(net.params.len() as u64).to_le_bytes());
        for p in &net.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        match &self.ema {
            Some(shadow) => {
                out.push(1);
                for p in shadow {
                    out.extend_from_slice(&p.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind_len = r.u32()? as usize;
        let kind = String::from_utf8(r.take(kind_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("kind tag is not UTF-8".into()))?;
        let n_widths = r.u32()? as usize;
        if n_widths > 64 {
            return Err(Error::Checkpoint("implausible layer count".into()));
        }
        let widths = (0..n_widths).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let flags = r.u64()? as usize;
        let emb = r.u64()? as usize;
        let n = r.u64()? as usize;
        let params = r.f64s(n)?;
        let net = DenseNet::from_params(&widths, flags, emb, params)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ema = match r.take(1)?[0] {
            0 => None,
            1 => Some(r.f64s(n)?),
            _ => return Err(Error::Checkpoint("bad EMA marker".into())),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { kind, net, ema })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use rand::Rng as _;

    /// Loop-based re-implementation used as an independent oracle.
    fn naive_forward(widths: &[usize], flags: usize, emb: usize, p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut offs = Vec::new();
        let mut o = 0;
        for l in 0..widths.len() - 1 {
            offs.push(o);
            o += (widths[l] + 1) * widths[l + 1];
        }
        let e: Vec<f64> = (0..emb)
            .map(|k| {
                let mut v = p[o + flags * emb + k];
                for f in 0..flags {
                    v += x[widths[0] - flags + f] * p[o + f * emb + k];
                }
                v
            })
            .collect();
        let mut a = x.to_vec();
        let n = widths.len() - 1;
        for l in 0..n {
            if emb > 0 && l >= 1 && l + 1 < n {
                for k in 0..emb {
                    a[k] += e[k];
                }
            }
            let (i, out) = (widths[l], widths[l + 1]);
            let mut z = vec![0.0; out];
            for j in 0..out {
                let mut acc = p[offs[l] + i * out + j];
                for q in 0..i {
                    acc += a[q] * p[offs[l] + q * out + j];
                }
                z[j] = if l + 1 < n { acc / (1.0 + (-acc).exp()) } else { acc };
            }
            a = z;
        }
        a
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::zeros(&[3, 4, 2], 0, 0).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_echoes_input() {
        let mut params = vec![0.0; 3 * 3 + 3];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let net = DenseNet::from_params(&[3, 3], 0, 0, params).unwrap();
        assert_eq!(net.forward(&[0.5, -1.0, 7.0]).unwrap(), vec![0.5, -1.0, 7.0]);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = rng_for(1, 0);
        let widths = [7, 16, 16, 16, 16, 16, 4];
        let net = DenseNet::init(&widths, 2, 4, &mut rng).unwrap();
        // Nonzero biases too.
        let mut net = net;
        for p in net.params_mut() {
            *p += 0.05 * rng.gen::<f64>();
        }
        for _ in 0..20 {
            let mut x: Vec<f64> = (0..7).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            x[5] = (rng.gen::<f64>() < 0.5) as u8 as f64;
            x[6] = (rng.gen::<f64>() < 0.5) as u8 as f64;
            let got = net.forward(&x).unwrap();
            let want = naive_forward(&widths, 2, 4, net.params(), &x);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let mut rng = rng_for(2, 0);
        let net = DenseNet::init(&[3, 2], 0, 0, &mut rng).unwrap();
        let x = Array2::from_shape_vec((1, 3), vec![0.3, -1.2, 2.0]).unwrap();
        let (_, tape) = net.forward_tape(x.view()).unwrap();
        let cot = Array2::from_shape_vec((1, 2), vec![1.5, -0.5]).unwrap();
        let mut g = vec![0.0; net.param_count()];
        net.backward(&tape, cot.view(), &mut g).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((g[i * 2 + j] - x[(0, i)] * cot[(0, j)]).abs() < 1e-15);
            }
        }
        assert_eq!(&g[6..8], &[1.5, -0.5]);
        let mut g0 = vec![0.0; net.param_count()];
        let d_in = net.backward(&tape, Array2::zeros((1, 2)).view(), &mut g0).unwrap();
        assert!(g0.iter().all(|v| *v == 0.0));
        assert!(d_in.iter().all(|v| *v == 0.0));
    }

    fn check_gradients(widths: &[usize], flags: usize, emb: usize, seed: u64) {
        let mut rng = rng_for(seed, 0);
        let mut net = DenseNet::init(widths, flags, emb, &mut rng).unwrap();
        for p in net.params_mut() {
            *p += 0.1 * (rng.gen::<f64>() - 0.5);
        }
        let b = 5;
        let x = Array2::from_shape_fn((b, widths[0]), |(_, j)| {
            if j >= widths[0] - flags {
                (rng.gen::<f64>() < 0.5) as u8 as f64
            } else {
                rng.gen::<f64>() * 2.0 - 1.0
            }
        });
        let cot = Array2::from_shape_fn((b, net.output_width()), |_| rng.gen::<f64>() - 0.5);
        let loss = |n: &DenseNet, x: &Array2<f64>| (n.forward_batch(x.view()).unwrap() * &cot).sum();
        let (_, tape) = net.forward_tape(x.view()).unwrap();
        let mut g = vec![0.0; net.param_count()];
        let d_in = net.backward(&tape, cot.view(), &mut g).unwrap();
        let h = 1e-4;
        let mut idx: Vec<usize> = (0..20).map(|_| rng.gen_range(0..net.param_count())).collect();
        if emb > 0 {
            // Always include embedding weights.
            idx.push(net.embedding_offset());
            idx.push(net.param_count() - 1);
        }
        for i in idx {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
            assert!(rel < 1e-4, "param {i}: fd {fd} vs {}", g[i]);
        }
        for j in 0..widths[0] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[(0, j)] += h;
            xm[(0, j)] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            let rel = (fd - d_in[(0, j)]).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-4, "input {j}: fd {fd} vs {}", d_in[(0, j)]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Joint score net shape for d = 2 and ratio net shape.
        check_gradients(&[7, 32, 32, 32, 32, 32, 4], 2, 8, 3);
        check_gradients(&[2, 32, 32, 32, 1], 0, 0, 4);
        check_gradients(&[11, 64, 64, 64, 64, 64, 8], 2, 16, 5);
    }

    #[test]
    fn learning_rate_schedule() {
        let adam = Adam::new(1, 0.005, 1024);
        assert_eq!(adam.learning_rate(1), 0.005);
        assert_eq!(adam.learning_rate(1024), 0.005);
        assert!((adam.learning_rate(4096) - 0.0025).abs() < 1e-18);
        let mut lit = Adam::new(1, 0.005, 1024);
        lit.schedule = LrSchedule::Literal;
        assert!((lit.learning_rate(2048) - 0.005 / 2048.0).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut adam = Adam::new(3, 0.005, 1024);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3], 1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert!(matches!(
            adam.step(&mut p, &[f64::NAN, 0.0, 0.0], 2),
            Err(Error::Training { .. })
        ));
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // Bias-corrected first step is lr * g / (|g| + eps).
        let mut adam = Adam::new(2, 0.01, 10);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[3.0, -0.2], 1).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9 && (p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_modes() {
        let mut dec = Adam::new(1, 0.1, 1);
        dec.weight_decay = 0.5;
        let mut p = vec![2.0];
        dec.step(&mut p, &[0.0], 1).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        let mut cou = Adam::new(1, 0.1, 1);
        cou.weight_decay = 0.5;
        cou.decay_mode = WeightDecayMode::Coupled;
        let mut p = vec![2.0];
        cou.step(&mut p, &[0.0], 1).unwrap();
        // Gradient becomes 1.0, so the first Adam step moves by the full rate.
        assert!((p[0] - 1.9).abs() < 1e-8);
    }

    #[test]
    fn ema_basics() {
        let mut ema = Ema::new(&[5.0], 0.01);
        ema.update(&[3.0], 1);
        assert_eq!(ema.shadow(), &[3.0]);
        let mut ema = Ema::new(&[1.5, -2.0], 0.01);
        for t in 1..=100 {
            ema.update(&[1.5, -2.0], t);
        }
        assert_eq!(ema.shadow(), &[1.5, -2.0]);
    }

    #[test]
    fn ema_matches_replay_of_recursion() {
        // γ from the cubic γ^3 + 7γ^2 + (16 - t)γ + (12 - t) = 0, t = σ^-2,
        // solved by Newton from a large start.
        let t = 1e4;
        let mut g = 200.0f64;
        for _ in 0..100 {
            let f = g.powi(3) + 7.0 * g * g + (16.0 - t) * g + (12.0 - t);
            let df = 3.0 * g * g + 14.0 * g + (16.0 - t);
            g -= f / df;
        }
        let ema_gamma = power_ema_gamma(0.01);
        assert!((ema_gamma - g).abs() < 1e-9, "{ema_gamma} vs {g}");
        let mut ema = Ema::new(&[0.0], 0.01);
        let mut replay = 0.0f64;
        for step in 1..=8192usize {
            let p = 1e-3 * step as f64;
            ema.update(&[p], step);
            let beta = (1.0 - 1.0 / step as f64).powf(g + 1.0);
            replay = (1.0 - beta) * p + beta * replay;
        }
        assert!((ema.shadow()[0] - replay).abs() < 1e-10);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rng_for(4, 0);
        let net = DenseNet::init(&[7, 8, 8, 8, 4], 2, 4, &mut rng).unwrap();
        let ck = Checkpoint {
            kind: "joint-score-v1".into(),
            net: net.clone(),
            ema: Some(net.params().iter().map(|p| p * 0.5).collect()),
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
