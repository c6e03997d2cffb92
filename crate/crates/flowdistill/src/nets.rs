//! Velocity networks and the frozen-backbone discriminator.
//!
//! One architecture serves the teacher, the generator, and the auxiliary
//! denoising model: identical layouts make whole-model blends and distances
//! well-defined across the three parameter sets. Every forward exists in two
//! forms that share the same kernels and evaluation order, so the no-grad
//! fast path is bit-identical to the taped path:
//!   - a plain evaluation on tensors, used by samplers and metrics,
//!   - a tape evaluation, used inside loss closures.

use crate::ndgrad::{kernels, ParamLayout, ParamVector, Tape, Tensor, Var};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;
use std::sync::Arc;

/// Shape of a velocity network. `depth` counts hidden layers of size
/// `width`; the input is x (2) plus sinusoidal time features plus a learned
/// condition embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub n_conditions: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { width: 128, depth: 4, time_embed_dim: 32, cond_embed_dim: 16, n_conditions: 1 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.cond_embed_dim == 0 || self.n_conditions == 0
        {
            return Err(Error::contract(
                "NetConfig::validate",
                "width, depth, cond_embed_dim, n_conditions must be positive".to_string(),
            ));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::contract(
                "NetConfig::validate",
                format!("time_embed_dim must be even and >= 2, got {}", self.time_embed_dim),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        2 + self.time_embed_dim + self.cond_embed_dim
    }
}

/// Sinusoidal features of a single time value: interleaved (sin, cos) pairs
/// over a geometric frequency ladder, on the scaled time s = 1000 t.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
    let s = 1000.0 * t;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let w = 10_000f64.powf(-(i as f64) / denom);
        out.push((s * w).sin());
        out.push((s * w).cos());
    }
    out
}

fn check_times(op: &'static str, ts: &[f64]) -> Result<()> {
    for &t in ts {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract(op, format!("t must be in [0, 1], got {t}")));
        }
    }
    Ok(())
}

fn check_batch(op: &'static str, x: &Tensor, ts: &[f64], conds: &[usize], n_cond: usize) -> Result<usize> {
    if x.rank() != 2 || x.cols() != 2 {
        return Err(Error::contract(op, format!("x must be n x 2, got {:?}", x.shape())));
    }
    let n = x.rows();
    if ts.len() != n || conds.len() != n {
        return Err(Error::contract(
            op,
            format!("batch size mismatch: x has {n} rows, {} times, {} labels", ts.len(), conds.len()),
        ));
    }
    if let Some(&bad) = conds.iter().find(|&&c| c >= n_cond) {
        return Err(Error::contract(op, format!("condition label {bad} out of range {n_cond}")));
    }
    check_times(op, ts)?;
    Ok(n)
}

/// An MLP velocity field v(x, t, c) -> R^2.
#[derive(Clone, Debug)]
pub struct VelocityNet {
    cfg: NetConfig,
    params: ParamVector,
}

impl VelocityNet {
    pub fn layout(cfg: &NetConfig) -> Result<Arc<ParamLayout>> {
        cfg.validate()?;
        let mut entries = vec![(
            "cond_embed".to_string(),
            vec![cfg.n_conditions, cfg.cond_embed_dim],
        )];
        let mut fan_in = cfg.input_dim();
        for i in 0..cfg.depth {
            entries.push((format!("w{i}"), vec![fan_in, cfg.width]));
            entries.push((format!("b{i}"), vec![cfg.width]));
            fan_in = cfg.width;
        }
        entries.push(("w_out".to_string(), vec![cfg.width, 2]));
        entries.push(("b_out".to_string(), vec![2]));
        Ok(Arc::new(ParamLayout::new(entries)?))
    }

    pub fn new<R: Rng>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        let layout = Self::layout(&cfg)?;
        let mut flat = vec![0.0; layout.total_len()];
        for (i, e) in layout.entries().iter().enumerate() {
            let (lo, hi) = layout.range(i);
            let std = if e.name == "cond_embed" {
                0.5
            } else if e.name == "w_out" {
                0.01
            } else if e.name.starts_with('w') {
                (2.0 / e.shape[0] as f64).sqrt()
            } else {
                0.0
            };
            if std > 0.0 {
                for v in &mut flat[lo..hi] {
                    *v = std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Ok(VelocityNet { cfg, params: ParamVector::from_flat(layout, flat)? })
    }

    /// Wraps an existing parameter vector; its layout must match `cfg`.
    pub fn from_params(cfg: NetConfig, params: ParamVector) -> Result<Self> {
        cfg.validate()?;
        let expected = Self::layout(&cfg)?;
        if *params.layout() != *expected {
            return Err(Error::contract(
                "VelocityNet::from_params",
                "parameter layout does not match the architecture".to_string(),
            ));
        }
        Ok(VelocityNet { cfg, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if *params.layout() != *self.params.layout() {
            return Err(Error::contract("VelocityNet::set_params", "layout mismatch".to_string()));
        }
        self.params = params;
        Ok(())
    }

    /// Input feature matrix [x | time features | condition embedding].
    fn input_features(&self, x: &Tensor, ts: &[f64], conds: &[usize]) -> Result<Tensor> {
        let n = x.rows();
        let d = self.cfg.input_dim();
        let emb = self.params.slice(0);
        let dc = self.cfg.cond_embed_dim;
        let mut feat = vec![0.0; n * d];
        for i in 0..n {
            let row = &mut feat[i * d..(i + 1) * d];
            row[0] = x.row(i)[0];
            row[1] = x.row(i)[1];
            let tf = time_features(ts[i], self.cfg.time_embed_dim);
            row[2..2 + tf.len()].copy_from_slice(&tf);
            let c = conds[i];
            row[2 + tf.len()..].copy_from_slice(&emb[c * dc..(c + 1) * dc]);
        }
        Tensor::matrix(n, d, feat)
    }

    /// Plain batched forward: one velocity per row of `x`.
    pub fn forward(&self, x: &Tensor, ts: &[f64], conds: &[usize]) -> Result<Tensor> {
        let n = check_batch("VelocityNet::forward", x, ts, conds, self.cfg.n_conditions)?;
        let feat = self.input_features(x, ts, conds)?;
        let mut h = feat.into_data();
        let mut h_cols = self.cfg.input_dim();
        for layer in 0..self.cfg.depth {
            let wi = self.params.slice(1 + 2 * layer);
            let bi = self.params.slice(2 + 2 * layer);
            let mut z = vec![0.0; n * self.cfg.width];
            kernels::matmul(&h, wi, &mut z, n, h_cols, self.cfg.width);
            for r in 0..n {
                for j in 0..self.cfg.width {
                    z[r * self.cfg.width + j] = kernels::silu(z[r * self.cfg.width + j] + bi[j]);
                }
            }
            h = z;
            h_cols = self.cfg.width;
        }
        let w_out = self.params.slice(1 + 2 * self.cfg.depth);
        let b_out = self.params.slice(2 + 2 * self.cfg.depth);
        let mut out = vec![0.0; n * 2];
        kernels::matmul(&h, w_out, &mut out, n, h_cols, 2);
        for r in 0..n {
            out[r * 2] += b_out[0];
            out[r * 2 + 1] += b_out[1];
        }
        let out = Tensor::matrix(n, 2, out)?;
        if let Some(bad) = out.first_non_finite() {
            return Err(Error::numeric("VelocityNet::forward", format!("non-finite output {bad}")));
        }
        Ok(out)
    }

    /// Taped forward with parameters supplied as tape variables in layout
    /// order (leaves when training this net, constants when it is held
    /// fixed). `x` is any n x 2 variable already on the tape.
    pub fn forward_tape(
        cfg: &NetConfig,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        ts: &[f64],
        conds: &[usize],
    ) -> Result<Var> {
        let n = check_batch("VelocityNet::forward_tape", tape.value(x), ts, conds, cfg.n_conditions)?;
        let mut tf = vec![0.0; n * cfg.time_embed_dim];
        for i in 0..n {
            let row = time_features(ts[i], cfg.time_embed_dim);
            tf[i * cfg.time_embed_dim..(i + 1) * cfg.time_embed_dim].copy_from_slice(&row);
        }
        let t_emb = tape.constant(Tensor::matrix(n, cfg.time_embed_dim, tf)?);
        let c_emb = tape.gather_rows(params[0], conds)?;
        let mut h = tape.concat_cols(&[x, t_emb, c_emb])?;
        for layer in 0..cfg.depth {
            let z = tape.matmul(h, params[1 + 2 * layer])?;
            let zb = tape.add_row(z, params[2 + 2 * layer])?;
            h = tape.silu(zb)?;
        }
        let z = tape.matmul(h, params[1 + 2 * cfg.depth])?;
        tape.add_row(z, params[2 + 2 * cfg.depth])
    }

    /// Velocity at one shared time and condition for a whole batch.
    pub fn velocity(&self, x: &Tensor, t: f64, cond: usize) -> Result<Tensor> {
        let n = if x.rank() == 2 { x.rows() } else { 1 };
        self.forward(x, &vec![t; n], &vec![cond; n])
    }
}

/// One Euler displacement of the generator from `tau_from` down to `tau_to`.
pub fn generator_step(
    net: &VelocityNet,
    x: &Tensor,
    tau_from: f64,
    tau_to: f64,
    conds: &[usize],
) -> Result<Tensor> {
    if tau_to > tau_from {
        return Err(Error::contract(
            "generator_step",
            format!("must step backward in time: tau_from {tau_from} -> tau_to {tau_to}"),
        ));
    }
    let n = x.rows();
    let v = net.forward(x, &vec![tau_from; n], conds)?;
    let dt = tau_to - tau_from;
    x.zip_map(&v, "generator_step", |xi, vi| xi + dt * vi)
}

/// Discriminator shape: a frozen random feature backbone and a trainable
/// multiplicative fusion head over (sample, reference, condition).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub backbone_width: usize,
    pub head_dim: usize,
    pub n_conditions: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig { backbone_width: 256, head_dim: 64, n_conditions: 1 }
    }
}

/// A conditional discriminator D(x, c, r): frozen two-layer features of the
/// sample and of a same-condition real reference, fused elementwise with a
/// condition embedding by the trainable head and summed into one logit.
#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscConfig,
    backbone: ParamVector,
    head: ParamVector,
}

impl Discriminator {
    pub fn backbone_layout(cfg: &DiscConfig) -> Result<Arc<ParamLayout>> {
        Ok(Arc::new(ParamLayout::new(vec![
            ("fb_w0".to_string(), vec![2, cfg.backbone_width]),
            ("fb_b0".to_string(), vec![cfg.backbone_width]),
            ("fb_w1".to_string(), vec![cfg.backbone_width, cfg.backbone_width]),
            ("fb_b1".to_string(), vec![cfg.backbone_width]),
        ])?))
    }

    pub fn head_layout(cfg: &DiscConfig) -> Result<Arc<ParamLayout>> {
        Ok(Arc::new(ParamLayout::new(vec![
            ("hd_wx".to_string(), vec![cfg.backbone_width, cfg.head_dim]),
            ("hd_wr".to_string(), vec![cfg.backbone_width, cfg.head_dim]),
            ("hd_cond".to_string(), vec![cfg.n_conditions, cfg.head_dim]),
        ])?))
    }

    pub fn new<R: Rng>(cfg: DiscConfig, rng: &mut R) -> Result<Self> {
        if cfg.backbone_width == 0 || cfg.head_dim == 0 || cfg.n_conditions == 0 {
            return Err(Error::contract(
                "Discriminator::new",
                "backbone_width, head_dim, n_conditions must be positive".to_string(),
            ));
        }
        let b_layout = Self::backbone_layout(&cfg)?;
        let mut b_flat = vec![0.0; b_layout.total_len()];
        for (i, e) in b_layout.entries().iter().enumerate() {
            if e.name.starts_with("fb_w") {
                let (lo, hi) = b_layout.range(i);
                let std = (2.0 / e.shape[0] as f64).sqrt();
                for v in &mut b_flat[lo..hi] {
                    *v = std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let h_layout = Self::head_layout(&cfg)?;
        let mut h_flat = vec![0.0; h_layout.total_len()];
        for (i, e) in h_layout.entries().iter().enumerate() {
            let (lo, hi) = h_layout.range(i);
            let std = if e.name == "hd_cond" { 0.1 } else { (1.0 / e.shape[0] as f64).sqrt() };
            for v in &mut h_flat[lo..hi] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(Discriminator {
            cfg,
            backbone: ParamVector::from_flat(b_layout, b_flat)?,
            head: ParamVector::from_flat(h_layout, h_flat)?,
        })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.cfg
    }

    pub fn backbone_params(&self) -> &ParamVector {
        &self.backbone
    }

    pub fn head_params(&self) -> &ParamVector {
        &self.head
    }

    pub fn set_head_params(&mut self, head: ParamVector) -> Result<()> {
        if *head.layout() != *self.head.layout() {
            return Err(Error::contract(
                "Discriminator::set_head_params",
                "layout mismatch".to_string(),
            ));
        }
        self.head = head;
        Ok(())
    }

    /// Frozen features of a batch, plain evaluation.
    pub fn backbone_features(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.cols() != 2 {
            return Err(Error::contract(
                "Discriminator::backbone_features",
                format!("x must be n x 2, got {:?}", x.shape()),
            ));
        }
        let n = x.rows();
        let w = self.cfg.backbone_width;
        let mut h = vec![0.0; n * w];
        kernels::matmul(x.data(), self.backbone.slice(0), &mut h, n, 2, w);
        let b0 = self.backbone.slice(1);
        for r in 0..n {
            for j in 0..w {
                h[r * w + j] = kernels::silu(h[r * w + j] + b0[j]);
            }
        }
        let mut h2 = vec![0.0; n * w];
        kernels::matmul(&h, self.backbone.slice(2), &mut h2, n, w, w);
        let b1 = self.backbone.slice(3);
        for r in 0..n {
            for j in 0..w {
                h2[r * w + j] = kernels::silu(h2[r * w + j] + b1[j]);
            }
        }
        Tensor::matrix(n, w, h2)
    }

    /// Backbone weights placed on the tape as constants, in layout order.
    pub fn backbone_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.backbone.to_tensors().into_iter().map(|t| tape.constant(t)).collect()
    }

    /// Features from already-placed backbone variables.
    pub fn features_from_vars_tape(tape: &mut Tape, bvars: &[Var], x: Var) -> Result<Var> {
        let z0 = tape.matmul(x, bvars[0])?;
        let z0b = tape.add_row(z0, bvars[1])?;
        let h = tape.silu(z0b)?;
        let z1 = tape.matmul(h, bvars[2])?;
        let z1b = tape.add_row(z1, bvars[3])?;
        tape.silu(z1b)
    }

    /// Frozen features on the tape: weights enter as constants so gradients
    /// flow to the input `x` but never to the backbone.
    pub fn backbone_features_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let bvars = self.backbone_constants(tape);
        Self::features_from_vars_tape(tape, &bvars, x)
    }

    /// Head logits on the tape from sample features, reference features, and
    /// condition labels. `head` holds the head parameters in layout order.
    pub fn logits_from_features_tape(
        cfg: &DiscConfig,
        tape: &mut Tape,
        head: &[Var],
        fx: Var,
        fref: Var,
        conds: &[usize],
    ) -> Result<Var> {
        let zx = tape.matmul(fx, head[0])?;
        let zr = tape.matmul(fref, head[1])?;
        if let Some(&bad) = conds.iter().find(|&&c| c >= cfg.n_conditions) {
            return Err(Error::contract(
                "Discriminator::logits_from_features_tape",
                format!("condition label {bad} out of range {}", cfg.n_conditions),
            ));
        }
        let zc = tape.gather_rows(head[2], conds)?;
        let xr = tape.mul(zx, zr)?;
        let fused = tape.mul(xr, zc)?;
        tape.row_sum(fused)
    }

    /// Plain logits for evaluation: one real per row of `x`.
    pub fn logits(&self, x: &Tensor, conds: &[usize], x_ref: &Tensor) -> Result<Tensor> {
        if x.rows() != x_ref.rows() || conds.len() != x.rows() {
            return Err(Error::contract(
                "Discriminator::logits",
                "x, x_ref, conds must share the batch size".to_string(),
            ));
        }
        let fx = self.backbone_features(x)?;
        let fr = self.backbone_features(x_ref)?;
        let n = x.rows();
        let w = self.cfg.backbone_width;
        let hd = self.cfg.head_dim;
        let mut zx = vec![0.0; n * hd];
        let mut zr = vec![0.0; n * hd];
        kernels::matmul(fx.data(), self.head.slice(0), &mut zx, n, w, hd);
        kernels::matmul(fr.data(), self.head.slice(1), &mut zr, n, w, hd);
        let cond_table = self.head.slice(2);
        let mut out = vec![0.0; n];
        for r in 0..n {
            let c = conds[r];
            if c >= self.cfg.n_conditions {
                return Err(Error::contract(
                    "Discriminator::logits",
                    format!("condition label {c} out of range {}", self.cfg.n_conditions),
                ));
            }
            let ce = &cond_table[c * hd..(c + 1) * hd];
            let mut s = 0.0;
            for j in 0..hd {
                s += zx[r * hd + j] * zr[r * hd + j] * ce[j];
            }
            out[r] = s;
        }
        Ok(Tensor::vector(out))
    }
}

/// Write a parameter vector as a small text header (names and shapes in
/// layout order) followed by the flat values as little-endian f64 bytes.
/// Round trips are bit-exact.
pub fn save_params(path: &Path, params: &ParamVector) -> Result<()> {
    let mut header = String::from("params-v1\n");
    header.push_str(&format!("{}\n", params.layout().entries().len()));
    for e in params.layout().entries() {
        header.push_str(&e.name);
        for d in &e.shape {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
    }
    header.push_str(&format!("payload {}\n", params.len()));
    let mut f = std::fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for v in params.flat() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamVector> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let parse_err = |msg: String| Error::Parse { path: path.display().to_string(), msg };
    let mut pos = 0usize;
    let next_line = |raw: &[u8], pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < raw.len() && raw[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= raw.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                msg: "truncated header".to_string(),
            });
        }
        let line = String::from_utf8(raw[start..*pos].to_vec())
            .map_err(|e| Error::Parse { path: path.display().to_string(), msg: e.to_string() })?;
        *pos += 1;
        Ok(line)
    };
    if next_line(&raw, &mut pos)? != "params-v1" {
        return Err(parse_err("missing params-v1 magic".to_string()));
    }
    let n_entries: usize = next_line(&raw, &mut pos)?
        .parse()
        .map_err(|e| parse_err(format!("bad entry count: {e}")))?;
    let mut shapes = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let line = next_line(&raw, &mut pos)?;
        let mut it = line.split(' ');
        let name = it.next().ok_or_else(|| parse_err("empty entry line".to_string()))?.to_string();
        let dims: Vec<usize> = it
            .map(|d| d.parse().map_err(|e| parse_err(format!("bad dim in {name}: {e}"))))
            .collect::<Result<_>>()?;
        shapes.push((name, dims));
    }
    let payload_line = next_line(&raw, &mut pos)?;
    let len: usize = payload_line
        .strip_prefix("payload ")
        .ok_or_else(|| parse_err("missing payload line".to_string()))?
        .parse()
        .map_err(|e| parse_err(format!("bad payload length: {e}")))?;
    if raw.len() - pos != len * 8 {
        return Err(parse_err(format!(
            "payload expects {} bytes, file has {}",
            len * 8,
            raw.len() - pos
        )));
    }
    let mut flat = Vec::with_capacity(len);
    for i in 0..len {
        let mut b = [0u8; 8];
        b.copy_from_slice(&raw[pos + i * 8..pos + (i + 1) * 8]);
        flat.push(f64::from_le_bytes(b));
    }
    let layout = Arc::new(ParamLayout::new(shapes)?);
    ParamVector::from_flat(layout, flat)
}
