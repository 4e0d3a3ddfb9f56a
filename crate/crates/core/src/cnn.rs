//! Residual 1D convolutional feature extractor.
//!
//! Each layer is convolution → ReLU → dropout → optional max-pool. A
//! residual connection adds the saved output of a source layer to the
//! output of a later target layer, `X'' = F(X) + Uᵀ X`: the temporal axis
//! is matched by non-overlapping mean pooling and the channel axis by a
//! learned projection when the channel counts differ (identity otherwise).
//!
//! The product of every layer's stride and pool window must equal the
//! number of samples per epoch so that the output has exactly one feature
//! column per labelled epoch.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::numeric::kernels::{self, ConvGeometry};
use crate::numeric::{Bound, Padding, Params, SeedTree, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvLayerSpec {
    pub kernel_width: usize,
    pub stride: usize,
    pub out_channels: usize,
    /// 1 disables pooling.
    pub pool_window: usize,
    pub dropout_rate: f64,
}

impl ConvLayerSpec {
    pub const fn new(kernel_width: usize, stride: usize, out_channels: usize, pool_window: usize) -> Self {
        Self {
            kernel_width,
            stride,
            out_channels,
            pool_window,
            dropout_rate: DEFAULT_DROPOUT,
        }
    }

    fn factor(&self) -> usize {
        self.stride * self.pool_window
    }
}

pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub layers: Vec<ConvLayerSpec>,
    /// `(source, target)` layer indices, `source < target`.
    pub residuals: Vec<(usize, usize)>,
    pub input_channels: usize,
}

impl CnnConfig {
    /// Five 256-channel layers reducing 960 samples (30 s at 32 Hz) to one
    /// feature column, residual from layer 2 to layer 4.
    pub fn paper() -> Self {
        Self {
            layers: vec![
                ConvLayerSpec::new(10, 2, 256, 1),
                ConvLayerSpec::new(10, 2, 256, 5),
                ConvLayerSpec::new(8, 2, 256, 2),
                ConvLayerSpec::new(8, 2, 256, 2),
                ConvLayerSpec::new(6, 1, 256, 3),
            ],
            residuals: vec![(1, 3)],
            input_channels: 1,
        }
    }

    /// Five layers reducing 16 samples (4 s at 4 Hz) to one feature column.
    pub fn desk(channels: usize) -> Self {
        Self {
            layers: vec![
                ConvLayerSpec::new(8, 2, channels, 1),
                ConvLayerSpec::new(8, 2, channels, 2),
                ConvLayerSpec::new(5, 1, channels, 1),
                ConvLayerSpec::new(5, 1, channels, 2),
                ConvLayerSpec::new(3, 1, channels, 1),
            ],
            residuals: vec![(1, 3)],
            input_channels: 1,
        }
    }

    /// Two 4-channel layers reducing 4 samples to one column.
    pub fn tiny() -> Self {
        Self {
            layers: vec![ConvLayerSpec::new(3, 2, 4, 1), ConvLayerSpec::new(3, 1, 4, 2)],
            residuals: vec![(0, 1)],
            input_channels: 1,
        }
    }

    /// Total temporal downsampling `Π stride × pool`.
    pub fn downsampling(&self) -> usize {
        self.layers.iter().map(ConvLayerSpec::factor).product()
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(self.input_channels, |l| l.out_channels)
    }

    fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_channels
        } else {
            self.layers[layer - 1].out_channels
        }
    }

    fn residual_source(&self, target: usize) -> Option<usize> {
        self.residuals.iter().find(|(_, t)| *t == target).map(|(s, _)| *s)
    }

    /// Checks layer parameters, residual wiring, and that the downsampling
    /// equals `samples_per_epoch`.
    pub fn validate(&self, samples_per_epoch: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("CNN needs at least one layer".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel_width == 0 || l.stride == 0 || l.out_channels == 0 || l.pool_window == 0 {
                return Err(Error::Config(format!("layer {i}: sizes must be positive")));
            }
            if !(0.0..1.0).contains(&l.dropout_rate) {
                return Err(Error::Config(format!("layer {i}: dropout {} outside [0, 1)", l.dropout_rate)));
            }
        }
        for (k, &(s, t)) in self.residuals.iter().enumerate() {
            if s >= t || t >= self.layers.len() {
                return Err(Error::Config(format!("residual ({s}, {t}) is not a forward pair of existing layers")));
            }
            if self.residuals[..k].iter().any(|&(_, t2)| t2 == t) {
                return Err(Error::Config(format!("layer {t} has more than one residual input")));
            }
        }
        let d = self.downsampling();
        if d != samples_per_epoch {
            return Err(Error::Config(format!(
                "CNN downsampling {d} does not equal {samples_per_epoch} samples per epoch"
            )));
        }
        Ok(())
    }

    /// Output length of every layer for an input of `n` samples.
    pub fn layer_lengths(&self, n: usize) -> Result<Vec<usize>> {
        let mut t = n;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let g = ConvGeometry::new(1, t, 1, l.kernel_width, l.stride, Padding::SameByStride)?;
            if g.t_out < l.pool_window {
                return dim_err(format!("pool window {} exceeds length {}", l.pool_window, g.t_out));
            }
            t = g.t_out / l.pool_window;
            out.push(t);
        }
        Ok(out)
    }

    /// Inclusive range of input samples that can influence output column
    /// `t` for an input of `n` samples, clamped to the signal.
    pub fn receptive_field(&self, n: usize, t: usize) -> Result<(usize, usize)> {
        let lengths = self.layer_lengths(n)?;
        let mut need: Vec<Option<(isize, isize)>> = vec![None; self.layers.len()];
        let merge = |slot: &mut Option<(isize, isize)>, r: (isize, isize)| {
            *slot = Some(match *slot {
                Some((a, b)) => (a.min(r.0), b.max(r.1)),
                None => r,
            });
        };
        let last = self.layers.len() - 1;
        need[last] = Some((t as isize, t as isize));
        let mut input = (0, 0);
        for i in (0..self.layers.len()).rev() {
            let Some((a, b)) = need[i] else { continue };
            let l = &self.layers[i];
            let t_in = if i == 0 { n } else { lengths[i - 1] };
            let g = ConvGeometry::new(1, t_in, 1, l.kernel_width, l.stride, Padding::SameByStride)?;
            let p = l.pool_window as isize;
            let (ca, cb) = (a * p, b * p + p - 1);
            let s = l.stride as isize;
            let pad = g.pad_left as isize;
            let range = (ca * s - pad, cb * s - pad + l.kernel_width as isize - 1);
            if i == 0 {
                input = range;
            } else {
                merge(&mut need[i - 1], range);
            }
            if let Some(src) = self.residual_source(i) {
                let ratio = (lengths[src] / lengths[i]) as isize;
                merge(&mut need[src], (a * ratio, b * ratio + ratio - 1));
            }
        }
        let hi = n as isize - 1;
        Ok((input.0.clamp(0, hi) as usize, input.1.clamp(0, hi) as usize))
    }
}

fn kernel_name(i: usize) -> String {
    format!("cnn.l{i}.kernel")
}

fn bias_name(i: usize) -> String {
    format!("cnn.l{i}.bias")
}

fn proj_name(src: usize, dst: usize) -> String {
    format!("cnn.res{src}_{dst}.proj")
}

/// Kernels ~ U(±√3/√fan_in) (unit variance × 1/fan_in), zero biases,
/// projections set to truncated identity.
pub fn cnn_init(config: &CnnConfig, seeds: SeedTree) -> Params {
    let mut rng = seeds.rng();
    let mut params = Params::new();
    for (i, l) in config.layers.iter().enumerate() {
        let c_in = config.in_channels(i);
        let fan_in = (c_in * l.kernel_width) as f64;
        let bound = 3f64.sqrt() / fan_in.sqrt();
        let data = (0..l.out_channels * c_in * l.kernel_width)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        params.insert(
            kernel_name(i),
            Tensor::new([l.out_channels, c_in, l.kernel_width], data).expect("shape by construction"),
        );
        params.insert(bias_name(i), Tensor::zeros([l.out_channels]));
    }
    for &(s, t) in &config.residuals {
        let (cs, ct) = (config.layers[s].out_channels, config.layers[t].out_channels);
        if cs != ct {
            let mut u = Tensor::zeros([ct, cs]);
            for d in 0..cs.min(ct) {
                u.data_mut()[d * cs + d] = 1.0;
            }
            params.insert(proj_name(s, t), u);
        }
    }
    params
}

/// Maps a `[input_channels × n]` signal to `[C_last × m]` features.
pub fn cnn_forward(
    tape: &mut Tape,
    params: &Bound,
    config: &CnnConfig,
    signal: Var,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let (c, n) = tape.value(signal).dims2()?;
    if c != config.input_channels {
        return dim_err(format!("signal has {c} channels, CNN expects {}", config.input_channels));
    }
    config.layer_lengths(n)?;
    let mut outputs: Vec<Var> = Vec::with_capacity(config.layers.len());
    let mut x = signal;
    for (i, l) in config.layers.iter().enumerate() {
        let k = params.get(&kernel_name(i))?;
        let b = params.get(&bias_name(i))?;
        let y = tape.conv1d(x, k, b, l.stride, Padding::SameByStride)?;
        let y = tape.relu(y);
        let y = tape.dropout(y, l.dropout_rate, training, rng)?;
        let mut y = tape.maxpool1d(y, l.pool_window)?;
        if let Some(src) = config.residual_source(i) {
            let skip = residual_path(tape, params, outputs[src], y, src, i)?;
            y = tape.add(y, skip)?;
        }
        outputs.push(y);
        x = y;
    }
    Ok(x)
}

fn residual_path(tape: &mut Tape, params: &Bound, source: Var, target: Var, s: usize, t: usize) -> Result<Var> {
    let (cs, ts) = tape.value(source).dims2()?;
    let (ct, tt) = tape.value(target).dims2()?;
    if tt == 0 || ts % tt != 0 {
        return dim_err(format!("residual {s}->{t}: length {ts} is not a multiple of {tt}"));
    }
    let pooled = tape.avgpool1d(source, ts / tt)?;
    if cs == ct {
        Ok(pooled)
    } else {
        let u = params.get(&proj_name(s, t))?;
        tape.matmul(u, pooled)
    }
}

/// Tape-free inference forward pass (dropout off) that keeps only the
/// activations still needed, for very long inputs.
pub fn cnn_infer(config: &CnnConfig, params: &Params, signal: &Tensor) -> Result<Tensor> {
    let (c, _) = signal.dims2()?;
    if c != config.input_channels {
        return dim_err(format!("signal has {c} channels, CNN expects {}", config.input_channels));
    }
    let needed_later = |i: usize| config.residuals.iter().any(|&(s, _)| s == i);
    let mut saved: Vec<Option<Tensor>> = vec![None; config.layers.len()];
    let mut x = signal.clone();
    for (i, l) in config.layers.iter().enumerate() {
        let k = params.get(&kernel_name(i))?;
        let b = params.get(&bias_name(i))?;
        let (c_in, t_in) = x.dims2()?;
        let g = match *k.shape() {
            [co, ci, w] if ci == c_in => ConvGeometry::new(c_in, t_in, co, w, l.stride, Padding::SameByStride)?,
            _ => return dim_err(format!("layer {i}: kernel shape {:?}", k.shape())),
        };
        let mut y = kernels::conv1d_forward(x.data(), k.data(), b.data(), &g);
        drop(x);
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut y = if l.pool_window > 1 {
            let (pooled, _) = kernels::maxpool_forward(&y, g.c_out, g.t_out, l.pool_window)?;
            Tensor::new([g.c_out, g.t_out / l.pool_window], pooled)?
        } else {
            Tensor::new([g.c_out, g.t_out], y)?
        };
        if let Some(src) = config.residual_source(i) {
            let s = saved[src].take().ok_or_else(|| Error::Config(format!("residual source {src} missing")))?;
            let (cs, ts) = s.dims2()?;
            let (ct, tt) = y.dims2()?;
            if ts % tt != 0 {
                return dim_err(format!("residual {src}->{i}: length {ts} is not a multiple of {tt}"));
            }
            let pooled = kernels::avgpool_forward(s.data(), cs, ts, ts / tt)?;
            let skip = if cs == ct {
                pooled
            } else {
                kernels::matmul(params.get(&proj_name(src, i))?.data(), &pooled, ct, cs, tt)
            };
            y.data_mut().iter_mut().zip(&skip).for_each(|(a, b)| *a += b);
        }
        if needed_later(i) {
            saved[i] = Some(y.clone());
        }
        x = y;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;

    fn no_rng() -> crate::numeric::StreamRng {
        SeedTree::new(0).rng()
    }

    fn run(config: &CnnConfig, params: &Params, signal: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x = tape.leaf(signal.clone());
        let z = cnn_forward(&mut tape, &b, config, x, false, &mut no_rng()).unwrap();
        tape.value(z).clone()
    }

    fn wave(n: usize) -> Tensor {
        Tensor::new([1, n], (0..n).map(|i| (i as f64 * 0.7).sin() + 0.1 * (i % 5) as f64).collect()).unwrap()
    }

    #[test]
    fn profile_downsampling() {
        assert_eq!(CnnConfig::paper().downsampling(), 960);
        assert_eq!(CnnConfig::desk(32).downsampling(), 16);
        assert_eq!(CnnConfig::tiny().downsampling(), 4);
        CnnConfig::paper().validate(960).unwrap();
        assert!(matches!(CnnConfig::desk(8).validate(960), Err(Error::Config(_))));
    }

    #[test]
    fn paper_layer_lengths() {
        let lens = CnnConfig::paper().layer_lengths(864_000).unwrap();
        assert_eq!(lens, vec![432_000, 43_200, 10_800, 2_700, 900]);
    }

    #[test]
    fn bad_residuals_rejected() {
        let mut c = CnnConfig::desk(4);
        c.residuals = vec![(3, 1)];
        assert!(c.validate(16).is_err());
        c.residuals = vec![(1, 7)];
        assert!(c.validate(16).is_err());
    }

    #[test]
    fn desk_output_has_one_column_per_epoch() {
        let cfg = CnnConfig::desk(6);
        let p = cnn_init(&cfg, SeedTree::new(3));
        for m in [1, 2, 7, 30] {
            let z = run(&cfg, &p, &wave(16 * m));
            assert_eq!(z.shape(), &[6, m]);
        }
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let cfg = CnnConfig::desk(10);
        assert_eq!(cnn_init(&cfg, SeedTree::new(1)), cnn_init(&cfg, SeedTree::new(1)));
        assert_ne!(cnn_init(&cfg, SeedTree::new(1)), cnn_init(&cfg, SeedTree::new(2)));
        // layer 3 has C_in·W = 10·5 = 50; layer with 100 inputs below
        let cfg = CnnConfig {
            layers: vec![ConvLayerSpec::new(10, 1, 10, 1), ConvLayerSpec::new(10, 1, 3, 1)],
            residuals: vec![],
            input_channels: 1,
        };
        let p = cnn_init(&cfg, SeedTree::new(4));
        let k = p.get("cnn.l1.kernel").unwrap();
        assert!(k.max_abs() <= 0.1 * 3f64.sqrt());
        assert!(k.max_abs() > 0.1);
        assert_eq!(p.get("cnn.l1.bias").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn initialized_activations_are_sane() {
        let cfg = CnnConfig::desk(16);
        let p = cnn_init(&cfg, SeedTree::new(9));
        let n = 16 * 20;
        let raw = wave(n);
        let norm = raw.sq_norm().sqrt();
        let unit = raw.map(|v| v / norm * (n as f64).sqrt());
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let mut x = tape.leaf(unit);
        for (i, l) in cfg.layers.iter().enumerate() {
            let k = b.get(&kernel_name(i)).unwrap();
            let bias = b.get(&bias_name(i)).unwrap();
            let y = tape.conv1d(x, k, bias, l.stride, Padding::SameByStride).unwrap();
            let y = tape.relu(y);
            x = tape.maxpool1d(y, l.pool_window).unwrap();
            let v = tape.value(x);
            let rms = (v.sq_norm() / v.len() as f64).sqrt();
            assert!(v.all_finite());
            assert!((0.01..=100.0).contains(&rms), "layer {i} rms {rms}");
        }
    }

    #[test]
    fn zero_target_layer_passes_source_through() {
        let cfg = CnnConfig {
            layers: vec![ConvLayerSpec::new(3, 1, 3, 1), ConvLayerSpec::new(3, 1, 3, 1)],
            residuals: vec![(0, 1)],
            input_channels: 1,
        };
        let mut p = cnn_init(&cfg, SeedTree::new(5));
        p.insert("cnn.l1.kernel", Tensor::zeros([3, 3, 3]));
        let signal = wave(12);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let x = tape.leaf(signal);
        let k0 = b.get("cnn.l0.kernel").unwrap();
        let b0 = b.get("cnn.l0.bias").unwrap();
        let y0 = tape.conv1d(x, k0, b0, 1, Padding::SameByStride).unwrap();
        let src = tape.relu(y0);
        let src = tape.value(src).clone();
        let cfg1 = CnnConfig { ..cfg.clone() };
        let out = run(&cfg1, &p, &wave(12));
        assert_eq!(out, src);
    }

    #[test]
    fn residual_changes_output() {
        let cfg = CnnConfig::desk(4);
        let p = cnn_init(&cfg, SeedTree::new(11));
        let with = run(&cfg, &p, &wave(64));
        let mut without_cfg = cfg.clone();
        without_cfg.residuals.clear();
        let without = run(&without_cfg, &p, &wave(64));
        let diff = with
            .data()
            .iter()
            .zip(without.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff > 0.0);
    }

    #[test]
    fn channel_projection_used_when_widths_differ() {
        let cfg = CnnConfig {
            layers: vec![
                ConvLayerSpec::new(3, 2, 3, 1),
                ConvLayerSpec::new(3, 1, 5, 2),
            ],
            residuals: vec![(0, 1)],
            input_channels: 1,
        };
        let p = cnn_init(&cfg, SeedTree::new(2));
        assert_eq!(p.get("cnn.res0_1.proj").unwrap().shape(), &[5, 3]);
        let z = run(&cfg, &p, &wave(12));
        assert_eq!(z.shape(), &[5, 3]);
    }

    #[test]
    fn tape_free_path_matches_tape() {
        for cfg in [CnnConfig::desk(5), CnnConfig::tiny()] {
            let p = cnn_init(&cfg, SeedTree::new(8));
            let s = wave(cfg.downsampling() * 9);
            let a = run(&cfg, &p, &s);
            let b = cnn_infer(&cfg, &p, &s).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_mask_is_seeded() {
        let cfg = CnnConfig::desk(4);
        let p = cnn_init(&cfg, SeedTree::new(1));
        let go = |seed| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let x = tape.leaf(wave(64));
            let z = cnn_forward(&mut tape, &b, &cfg, x, true, &mut SeedTree::new(seed).rng()).unwrap();
            tape.value(z).clone()
        };
        assert_eq!(go(3), go(3));
        assert_ne!(go(3), go(4));
    }

    #[test]
    fn receptive_field_bounds_dependence() {
        let cfg = CnnConfig::desk(3);
        let n = 16 * 10;
        let p = cnn_init(&cfg, SeedTree::new(6));
        let base = run(&cfg, &p, &wave(n));
        let t = 4;
        let (lo, hi) = cfg.receptive_field(n, t).unwrap();
        assert!(lo <= 16 * t && hi >= 16 * t + 15);
        for pos in [0, lo.saturating_sub(1), hi + 1, n - 1] {
            if (lo..=hi).contains(&pos) {
                continue;
            }
            let mut s = wave(n);
            s.data_mut()[pos] += 5.0;
            let out = run(&cfg, &p, &s);
            for c in 0..3 {
                assert_eq!(out.at2(c, t), base.at2(c, t), "pos {pos}");
            }
        }
    }

    #[test]
    fn tiny_cnn_gradients() {
        let cfg = CnnConfig::tiny();
        let mut p = cnn_init(&cfg, SeedTree::new(21));
        p.insert("signal", wave(12));
        let r = grad_check(
            |tape, b| {
                let x = b.get("signal")?;
                let z = cnn_forward(tape, b, &cfg, x, false, &mut no_rng())?;
                let sq = tape.mul(z, z)?;
                Ok(tape.sum(sq))
            },
            &p,
            1e-5,
            usize::MAX,
            &mut no_rng(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
