//! Conditional velocity MLP with hand-written reverse-mode gradients.
//!
//! Input layout per row: `[x (d) | sin(ω_k t) (K) | cos(ω_k t) (K) | e_c (E)]`
//! where `e_c` is a learned embedding of the condition label, with one extra
//! row reserved for the null (unconditional) label.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::{check_label, PassCounters, VelocityField};
use crate::interpolant::ScheduleKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetArch {
    pub hidden: Vec<usize>,
    /// Number of sinusoidal time frequencies `K`.
    pub n_freq: usize,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for NetArch {
    fn default() -> Self {
        Self { hidden: vec![128, 128, 128], n_freq: 16, embed_dim: 8, activation: Activation::Silu }
    }
}

impl NetArch {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Name, shape and offset of one parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct VelocityNet {
    dim: usize,
    n_labels: usize,
    arch: NetArch,
    schedule: ScheduleKind,
    freqs: Vec<f64>,
    layout: Vec<TensorSpec>,
    params: Vec<f64>,
    counters: PassCounters,
}

/// Intermediate values of a batched forward pass, kept for backprop.
struct Trace {
    labels: Vec<usize>,
    /// `acts[0]` is the input matrix, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

impl VelocityNet {
    /// Fresh network: normal(0, 1/fan_in) hidden weights, zero biases, unit
    /// normal label embeddings and an all-zero output layer.
    pub fn new(dim: usize, n_labels: usize, arch: NetArch, schedule: ScheduleKind, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("network dimension must be >= 1".into()));
        }
        arch.validate()?;
        let freqs = frequencies(arch.n_freq);
        let mut layout = vec![];
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec { name, shape, offset };
            offset += spec.len();
            layout.push(spec);
        };
        push("cond_table".into(), vec![n_labels + 1, arch.embed_dim]);
        let mut fan_in = dim + 2 * arch.n_freq + arch.embed_dim;
        let widths: Vec<usize> = arch.hidden.iter().cloned().chain([dim]).collect();
        for (l, &w) in widths.iter().enumerate() {
            push(format!("layer{l}.weight"), vec![w, fan_in]);
            push(format!("layer{l}.bias"), vec![w]);
            fan_in = w;
        }
        let mut params = vec![0.0; offset];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = widths.len();
        for spec in &layout {
            let std = if spec.name == "cond_table" {
                1.0
            } else if spec.name.ends_with(".weight") && spec.name != format!("layer{}.weight", n_layers - 1) {
                1.0 / (spec.shape[1] as f64).sqrt()
            } else {
                continue;
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[spec.offset..spec.offset + spec.len()] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(Self { dim, n_labels, arch, schedule, freqs, layout, params, counters: PassCounters::default() })
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn schedule_kind(&self) -> ScheduleKind {
        self.schedule
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dim + 2 * self.arch.n_freq + self.arch.embed_dim
    }

    fn n_layers(&self) -> usize {
        self.arch.hidden.len() + 1
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let spec = &self.layout[1 + 2 * l];
        ArrayView2::from_shape((spec.shape[0], spec.shape[1]), &self.params[spec.offset..spec.offset + spec.len()])
            .expect("layout shape")
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let spec = &self.layout[2 + 2 * l];
        ArrayView1::from(&self.params[spec.offset..spec.offset + spec.len()])
    }

    fn label_index(&self, cond: Option<usize>) -> Result<usize> {
        check_label(cond, self.n_labels)?;
        Ok(cond.unwrap_or(self.n_labels))
    }

    fn trace(&self, x: ArrayView2<f64>, t: &[f64], cond: &[Option<usize>]) -> Result<Trace> {
        check_dim(self.dim, x.ncols())?;
        check_dim(x.nrows(), t.len())?;
        check_dim(x.nrows(), cond.len())?;
        let labels = cond.iter().map(|c| self.label_index(*c)).collect::<Result<Vec<_>>>()?;
        let (d, k, e) = (self.dim, self.arch.n_freq, self.arch.embed_dim);
        let table = &self.params[..(self.n_labels + 1) * e];
        let mut input = Array2::zeros((x.nrows(), self.input_dim()));
        for (i, mut row) in input.rows_mut().into_iter().enumerate() {
            row.slice_mut(s![..d]).assign(&x.row(i));
            for (j, w) in self.freqs.iter().enumerate() {
                row[d + j] = (w * t[i]).sin();
                row[d + k + j] = (w * t[i]).cos();
            }
            let emb = &table[labels[i] * e..(labels[i] + 1) * e];
            row.slice_mut(s![d + 2 * k..]).iter_mut().zip(emb).for_each(|(r, v)| *r = *v);
        }
        let mut acts = vec![input];
        let mut pre = vec![];
        for l in 0..self.n_layers() {
            let mut z = acts[l].dot(&self.weight(l).t());
            z += &self.bias(l);
            if l + 1 < self.n_layers() {
                let act = self.arch.activation;
                acts.push(z.mapv(|v| act.apply(v)));
                pre.push(z);
            } else {
                acts.push(z);
            }
        }
        Ok(Trace { labels, acts, pre })
    }

    /// Reverse pass. Returns (parameter gradient, gradient w.r.t. the input
    /// matrix), both summed over the batch.
    fn pull(&self, trace: &Trace, upstream: ArrayView2<f64>, want_params: bool) -> (Vec<f64>, Array2<f64>) {
        let mut grad = if want_params { vec![0.0; self.params.len()] } else { vec![] };
        let mut delta = upstream.to_owned();
        for l in (0..self.n_layers()).rev() {
            if want_params {
                let w_spec = &self.layout[1 + 2 * l];
                let gw = delta.t().dot(&trace.acts[l]);
                grad[w_spec.offset..w_spec.offset + w_spec.len()]
                    .iter_mut()
                    .zip(gw.iter())
                    .for_each(|(g, v)| *g = *v);
                let b_spec = &self.layout[2 + 2 * l];
                let gb = delta.sum_axis(Axis(0));
                grad[b_spec.offset..b_spec.offset + b_spec.len()]
                    .iter_mut()
                    .zip(gb.iter())
                    .for_each(|(g, v)| *g = *v);
            }
            let mut prev = delta.dot(&self.weight(l));
            if l > 0 {
                let act = self.arch.activation;
                prev.zip_mut_with(&trace.pre[l - 1], |g, z| *g *= act.derivative(*z));
            }
            delta = prev;
        }
        if want_params {
            let e = self.arch.embed_dim;
            let off = self.dim + 2 * self.arch.n_freq;
            for (i, &lab) in trace.labels.iter().enumerate() {
                for j in 0..e {
                    grad[lab * e + j] += delta[[i, off + j]];
                }
            }
        }
        (grad, delta)
    }

    /// Deterministic prediction for one point. Counts one forward pass.
    pub fn forward(&self, x: &[f64], t: f64, cond: Option<usize>) -> Result<Vec<f64>> {
        self.velocity(x, t, cond)
    }

    /// Batched prediction. Counts one forward pass.
    pub fn forward_batch(&self, x: ArrayView2<f64>, t: &[f64], cond: &[Option<usize>]) -> Result<Array2<f64>> {
        self.velocity_batch(x, t, cond)
    }

    /// `upstreamᵀ·∂v/∂φ` at one point.
    pub fn backward_params(&self, x: &[f64], t: f64, cond: Option<usize>, upstream: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, upstream.len())?;
        let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::Shape { expected: self.dim, got: x.len() })?;
        let trace = self.trace(xv, &[t], &[cond])?;
        let up = ArrayView2::from_shape((1, self.dim), upstream).expect("row view");
        Ok(self.pull(&trace, up, true).0)
    }

    /// `upstreamᵀ·∂v/∂x_t` at one point. Counts one backward pass.
    pub fn backward_input(&self, x: &[f64], t: f64, cond: Option<usize>, upstream: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, upstream.len())?;
        check_dim(self.dim, x.len())?;
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let trace = self.trace(xv, &[t], &[cond])?;
        let up = ArrayView2::from_shape((1, self.dim), upstream).expect("row view");
        self.counters.backward();
        let (_, din) = self.pull(&trace, up, false);
        Ok(din.slice(s![0, ..self.dim]).to_vec())
    }

    /// Forward pass plus parameter gradient of `Σ_i upstream_iᵀ v_i` for a
    /// whole batch, without touching the pass counters. Used by training.
    pub fn value_and_param_grad(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
        cond: &[Option<usize>],
        upstream: impl FnOnce(&Array2<f64>) -> Array2<f64>,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        let trace = self.trace(x, t, cond)?;
        let out = trace.acts.last().expect("output layer").clone();
        let up = upstream(&out);
        check_dim(out.nrows(), up.nrows())?;
        check_dim(self.dim, up.ncols())?;
        let (grad, _) = self.pull(&trace, up.view(), true);
        Ok((out, grad))
    }

    /// Batched forward pass that leaves the counters alone.
    pub(crate) fn predict_uncounted(&self, x: ArrayView2<f64>, t: &[f64], cond: &[Option<usize>]) -> Result<Array2<f64>> {
        let mut trace = self.trace(x, t, cond)?;
        Ok(trace.acts.pop().expect("output layer"))
    }

    pub fn all_params_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

fn frequencies(k: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    match k {
        0 => vec![],
        1 => vec![PI],
        _ => (0..k).map(|i| PI * 32f64.powf(i as f64 / (k - 1) as f64)).collect(),
    }
}

impl VelocityField for VelocityNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_labels(&self) -> usize {
        self.n_labels
    }

    fn velocity_batch(&self, x: ArrayView2<f64>, t: &[f64], cond: &[Option<usize>]) -> Result<Array2<f64>> {
        let out = self.predict_uncounted(x, t, cond)?;
        self.counters.forward();
        Ok(out)
    }

    fn counters(&self) -> &PassCounters {
        &self.counters
    }

    fn input_vjp(&self, x: &[f64], t: f64, cond: Option<usize>, upstream: &[f64]) -> Result<Vec<f64>> {
        self.backward_input(x, t, cond, upstream)
    }
}

const MAGIC: &[u8; 8] = b"RFPCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schedule: ScheduleKind,
    dim: usize,
    n_labels: usize,
    arch: NetArch,
    tensors: Vec<TensorSpec>,
}

impl VelocityNet {
    /// Writes the checkpoint: `RFPCKPT1`, header length as u64 LE, JSON
    /// header, then every tensor in layout order as f64 LE.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            schedule: self.schedule,
            dim: self.dim,
            n_labels: self.n_labels,
            arch: self.arch.clone(),
            tensors: self.layout.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 24 {
            return Err(Error::Checkpoint(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut net = Self::new(header.dim, header.n_labels, header.arch, header.schedule, 0)?;
        if net.layout != header.tensors {
            return Err(Error::Checkpoint("tensor table does not match the architecture".into()));
        }
        let mut buf = [0u8; 8];
        for p in net.params.iter_mut() {
            r.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

/// Convenience for tests and callers holding a single row.
pub(crate) fn row(x: &[f64]) -> Array2<f64> {
    Array1::from(x.to_vec()).insert_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small(act: Activation, seed: u64) -> VelocityNet {
        let arch = NetArch { hidden: vec![16, 12], n_freq: 3, embed_dim: 4, activation: act };
        let mut net = VelocityNet::new(2, 3, arch, ScheduleKind::RectifiedFlow, seed).unwrap();
        // give the zero output layer some weight so gradients are non-trivial
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for p in net.params_mut() {
            if *p == 0.0 {
                *p = 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        net
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn zero_output_layer_gives_zero_velocity() {
        let net = VelocityNet::new(2, 3, NetArch::default(), ScheduleKind::RectifiedFlow, 1).unwrap();
        for cond in [None, Some(0), Some(2)] {
            assert_eq!(net.forward(&[1.3, -7.0], 0.4, cond).unwrap(), vec![0.0, 0.0]);
        }
        assert_eq!(net.counters().snapshot().forwards, 3);
        assert!(matches!(net.forward(&[0.0, 0.0], 0.4, Some(3)), Err(Error::UnknownLabel { .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = small(Activation::Silu, 4);
        let a = net.forward(&[0.2, 0.3], 0.6, Some(1)).unwrap();
        let b = net.forward(&[0.2, 0.3], 0.6, Some(1)).unwrap();
        assert_eq!(a, b);
        let batch = net.forward_batch(row(&[0.2, 0.3]).view(), &[0.6], &[Some(1)]).unwrap();
        assert_eq!(batch.row(0).to_vec(), a);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for cfg in 0..20 {
            let act = [Activation::Silu, Activation::Tanh, Activation::Identity][cfg % 3];
            let mut net = small(act, cfg as u64);
            let x = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
            let t: f64 = rng.random();
            let cond = if cfg % 4 == 0 { None } else { Some(cfg % 3) };
            let up = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
            let g = net.backward_params(&x, t, cond, &up).unwrap();
            let h = 1e-5;
            for idx in (0..net.num_params()).step_by(7) {
                let orig = net.params()[idx];
                net.params_mut()[idx] = orig + h;
                let fp = net.forward(&x, t, cond).unwrap();
                net.params_mut()[idx] = orig - h;
                let fm = net.forward(&x, t, cond).unwrap();
                net.params_mut()[idx] = orig;
                let fd: f64 = (0..2).map(|j| up[j] * (fp[j] - fm[j]) / (2.0 * h)).sum();
                assert!(rel_err(fd, g[idx]) <= 1e-5, "cfg {cfg} param {idx}: fd {fd} analytic {}", g[idx]);
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for cfg in 0..20 {
            let act = [Activation::Silu, Activation::Tanh][cfg % 2];
            let net = small(act, 100 + cfg as u64);
            let x = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
            let t: f64 = rng.random();
            let up = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
            let g = net.backward_input(&x, t, Some(1), &up).unwrap();
            let h = 1e-5;
            for i in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fp = net.forward(&xp, t, Some(1)).unwrap();
                let fm = net.forward(&xm, t, Some(1)).unwrap();
                let fd: f64 = (0..2).map(|j| up[j] * (fp[j] - fm[j]) / (2.0 * h)).sum();
                assert!(rel_err(fd, g[i]) <= 1e-5, "cfg {cfg}: fd {fd} analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn input_gradient_edge_cases() {
        let net = small(Activation::Silu, 3);
        assert_eq!(net.backward_input(&[0.4, 0.1], 0.3, None, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(net.counters().snapshot().backwards, 1);
        let lin = small(Activation::Identity, 3);
        let a = lin.backward_input(&[0.4, 0.1], 0.3, None, &[1.0, -2.0]).unwrap();
        let b = lin.backward_input(&[-5.0, 9.0], 0.3, None, &[1.0, -2.0]).unwrap();
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = small(Activation::Tanh, 5);
        let mut bytes = vec![];
        net.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = VelocityNet::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.layout(), net.layout());
        assert_eq!(
            back.forward(&[0.1, 0.2], 0.5, Some(2)).unwrap(),
            net.forward(&[0.1, 0.2], 0.5, Some(2)).unwrap()
        );
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(VelocityNet::read_checkpoint(corrupt.as_slice()).is_err());
        bytes.truncate(bytes.len() - 3);
        assert!(VelocityNet::read_checkpoint(bytes.as_slice()).is_err());
    }
}
