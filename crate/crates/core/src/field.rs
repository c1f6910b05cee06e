//! The trainable radiance field.
//!
//! A small fully-connected network maps an encoded position to a density and
//! a feature vector; the feature is concatenated with the encoded viewing
//! direction before the last two layers, which produce the color.
//!
//! ```text
//!   enc(x) -> [sharp softplus dense] x hidden_layers -> h
//!   h -> dense -> softplus                    = density
//!   h -> dense -> f ; [f, enc(d)] -> sharp softplus dense -> sigmoid dense = color
//! ```
//!
//! All dense weights are stored input-major (`w[i * out + o]`) in one flat
//! parameter vector so that optimizers and checkpoints see a single slice.

use matrixmultiply::dgemm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldArch {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
}

impl Default for FieldArch {
    fn default() -> Self {
        FieldArch {
            hidden_layers: 4,
            hidden_width: 64,
            pos_freqs: 6,
            dir_freqs: 2,
        }
    }
}

impl FieldArch {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::Config(format!(
                "field needs at least one hidden layer of width >= 1, got {}x{}",
                self.hidden_layers, self.hidden_width
            )));
        }
        if self.pos_freqs > 30 || self.dir_freqs > 30 {
            return Err(Error::Config("encoding frequency count must be <= 30".into()));
        }
        Ok(())
    }

    pub fn pos_dim(&self) -> usize {
        encoded_len(3, self.pos_freqs)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_len(3, self.dir_freqs)
    }

    /// Width of the direction-conditioned layer.
    pub fn view_width(&self) -> usize {
        (self.hidden_width / 2).max(1)
    }

    fn dense_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        let w = self.hidden_width;
        let mut shapes = vec![("trunk", self.pos_dim(), w)];
        for _ in 1..self.hidden_layers {
            shapes.push(("trunk", w, w));
        }
        shapes.push(("density", w, 1));
        shapes.push(("feature", w, w));
        shapes.push(("view", w + self.dir_dim(), self.view_width()));
        shapes.push(("color", self.view_width(), 3));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.dense_shapes().iter().map(|&(_, i, o)| i * o + o).sum()
    }
}

pub fn encoded_len(dims: usize, n_freqs: usize) -> usize {
    dims + dims * 2 * n_freqs
}

/// `[v, sin(2^0 pi v), cos(2^0 pi v), sin(2^1 pi v), ...]`, each sin/cos group
/// covering all components of `v`.
pub fn positional_encoding(v: &[f64], n_freqs: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_len(v.len(), n_freqs)];
    encode_into(v, n_freqs, &mut out);
    out
}

fn encode_into(v: &[f64], n_freqs: usize, out: &mut [f64]) {
    let k = v.len();
    out[..k].copy_from_slice(v);
    let mut scale = std::f64::consts::PI;
    for j in 0..n_freqs {
        let base = k + j * 2 * k;
        for (c, &x) in v.iter().enumerate() {
            let (s, co) = (scale * x).sin_cos();
            out[base + c] = s;
            out[base + k + c] = co;
        }
        scale *= 2.0;
    }
}

/// d(encoding)/dv contracted with the cotangent `g` on the encoding.
fn encode_backward(v: &[f64], n_freqs: usize, g: &[f64], out: &mut [f64]) {
    let k = v.len();
    out.copy_from_slice(&g[..k]);
    let mut scale = std::f64::consts::PI;
    for j in 0..n_freqs {
        let base = k + j * 2 * k;
        for (c, &x) in v.iter().enumerate() {
            let (s, co) = (scale * x).sin_cos();
            out[c] += scale * (co * g[base + c] - s * g[base + k + c]);
        }
        scale *= 2.0;
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sharpness of the hidden-layer softplus.
const HIDDEN_BETA: f64 = 10.0;

/// `softplus(b x) / b` and its slope `sigmoid(b x)` from one exponential.
#[inline]
fn hidden(x: f64) -> (f64, f64) {
    let z = HIDDEN_BETA * x;
    let e = (-z.abs()).exp();
    let act = (z.max(0.0) + e.ln_1p()) / HIDDEN_BETA;
    let slope = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (act, slope)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub color: [f64; 3],
    pub density: f64,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl Dense {
    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.inputs * self.outputs]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        let s = self.offset + self.inputs * self.outputs;
        &p[s..s + self.outputs]
    }

    fn len(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    /// `y = x W + b` for `n` row-major input rows.
    fn forward(&self, p: &[f64], x: &[f64], n: usize, y: &mut [f64]) {
        let b = self.bias(p);
        for row in y.chunks_exact_mut(self.outputs) {
            row.copy_from_slice(b);
        }
        // SAFETY: dimensions and strides describe the provided slices exactly.
        unsafe {
            dgemm(
                n,
                self.inputs,
                self.outputs,
                1.0,
                x.as_ptr(),
                self.inputs as isize,
                1,
                self.weights(p).as_ptr(),
                self.outputs as isize,
                1,
                1.0,
                y.as_mut_ptr(),
                self.outputs as isize,
                1,
            );
        }
    }

    /// Accumulates weight/bias gradients into `g`; writes `dx` when given.
    fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], n: usize, g: &mut [f64], dx: Option<&mut [f64]>) {
        let (gw, gb) = g[self.offset..self.offset + self.len()].split_at_mut(self.inputs * self.outputs);
        // SAFETY: as above; x is read transposed through its strides.
        unsafe {
            dgemm(
                self.inputs,
                n,
                self.outputs,
                1.0,
                x.as_ptr(),
                1,
                self.inputs as isize,
                dy.as_ptr(),
                self.outputs as isize,
                1,
                1.0,
                gw.as_mut_ptr(),
                self.outputs as isize,
                1,
            );
        }
        for row in dy.chunks_exact(self.outputs) {
            for (b, d) in gb.iter_mut().zip(row) {
                *b += d;
            }
        }
        if let Some(dx) = dx {
            // SAFETY: W is read transposed through its strides.
            unsafe {
                dgemm(
                    n,
                    self.outputs,
                    self.inputs,
                    1.0,
                    dy.as_ptr(),
                    self.outputs as isize,
                    1,
                    self.weights(p).as_ptr(),
                    1,
                    self.outputs as isize,
                    0.0,
                    dx.as_mut_ptr(),
                    self.inputs as isize,
                    1,
                );
            }
        }
    }
}

/// A named contiguous range of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Field weights (`Θ`) together with the architecture they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceFieldParams {
    arch: FieldArch,
    pub values: Vec<f64>,
}

/// Cached activations of a batched forward pass, consumed by the backward pass.
#[derive(Debug, Clone, Default)]
pub struct FieldTape {
    pub n: usize,
    positions: Vec<f64>,
    x_enc: Vec<f64>,
    trunk_slope: Vec<Vec<f64>>,
    trunk_act: Vec<Vec<f64>>,
    density_pre: Vec<f64>,
    view_in: Vec<f64>,
    view_slope: Vec<f64>,
    view_act: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub densities: Vec<f64>,
}

struct Layout {
    trunk: Vec<Dense>,
    density: Dense,
    feature: Dense,
    view: Dense,
    color: Dense,
}

impl Layout {
    fn new(arch: &FieldArch) -> Self {
        let mut offset = 0;
        let mut dense = arch
            .dense_shapes()
            .into_iter()
            .map(|(_, inputs, outputs)| {
                let d = Dense {
                    inputs,
                    outputs,
                    offset,
                };
                offset += d.len();
                d
            })
            .collect::<Vec<_>>();
        let color = dense.pop().unwrap();
        let view = dense.pop().unwrap();
        let feature = dense.pop().unwrap();
        let density = dense.pop().unwrap();
        Layout {
            trunk: dense,
            density,
            feature,
            view,
            color,
        }
    }
}

/// Fan-in scaled uniform initialization: weights in `±sqrt(6 / fan_in)`, biases zero.
pub fn init_params(arch: &FieldArch, seed: u64) -> Result<RadianceFieldParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(arch.param_count());
    for (_, inputs, outputs) in arch.dense_shapes() {
        let bound = (6.0 / inputs as f64).sqrt();
        for _ in 0..inputs * outputs {
            values.push(rng.gen_range(-bound..bound));
        }
        values.extend(std::iter::repeat_n(0.0, outputs));
    }
    Ok(RadianceFieldParams { arch: *arch, values })
}

impl RadianceFieldParams {
    pub fn from_values(arch: FieldArch, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(Error::shape(arch.param_count(), values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("parameter {i} is not finite")));
        }
        Ok(RadianceFieldParams { arch, values })
    }

    pub fn arch(&self) -> &FieldArch {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Weight and bias blocks in storage order (`trunk0.w`, `trunk0.b`, ...).
    pub fn blocks(&self) -> Vec<ParamBlock> {
        let mut trunk_idx = 0;
        let mut out = Vec::new();
        let mut offset = 0;
        for (name, inputs, outputs) in self.arch.dense_shapes() {
            let label = if name == "trunk" {
                trunk_idx += 1;
                format!("trunk{}", trunk_idx - 1)
            } else {
                name.to_string()
            };
            out.push(ParamBlock {
                name: format!("{label}.w"),
                offset,
                len: inputs * outputs,
            });
            offset += inputs * outputs;
            out.push(ParamBlock {
                name: format!("{label}.b"),
                offset,
                len: outputs,
            });
            offset += outputs;
        }
        out
    }

    /// Range of the final color layer (weights then bias).
    pub fn color_layer_range(&self) -> std::ops::Range<usize> {
        let c = Layout::new(&self.arch).color;
        c.offset..c.offset + c.len()
    }

    /// Single-point evaluation with input validation.
    pub fn forward(&self, x: [f64; 3], d: [f64; 3]) -> Result<FieldOutput> {
        if x.iter().chain(&d).any(|v| !v.is_finite()) {
            return Err(Error::Domain("field inputs must be finite".into()));
        }
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("direction must be unit length, |d| = {norm}")));
        }
        let tape = self.forward_batch(&[x], &[d]);
        Ok(FieldOutput {
            color: tape.colors[0],
            density: tape.densities[0],
        })
    }

    /// Batched forward pass. `dirs` has either one entry per position or a single
    /// entry shared by all positions (one ray).
    pub fn forward_batch(&self, positions: &[[f64; 3]], dirs: &[[f64; 3]]) -> FieldTape {
        let n = positions.len();
        let arch = &self.arch;
        let layout = Layout::new(arch);
        let p = &self.values;
        let w = arch.hidden_width;
        let (pos_dim, dir_dim, vw) = (arch.pos_dim(), arch.dir_dim(), arch.view_width());

        let mut x_enc = vec![0.0; n * pos_dim];
        for (x, out) in positions.iter().zip(x_enc.chunks_exact_mut(pos_dim)) {
            encode_into(x, arch.pos_freqs, out);
        }

        let mut trunk_slope = Vec::with_capacity(layout.trunk.len());
        let mut trunk_act: Vec<Vec<f64>> = Vec::with_capacity(layout.trunk.len());
        for (l, dense) in layout.trunk.iter().enumerate() {
            let input = if l == 0 { &x_enc } else { &trunk_act[l - 1] };
            let mut pre = vec![0.0; n * w];
            dense.forward(p, input, n, &mut pre);
            let mut act = vec![0.0; n * w];
            for (a, v) in act.iter_mut().zip(pre.iter_mut()) {
                (*a, *v) = hidden(*v);
            }
            trunk_slope.push(pre);
            trunk_act.push(act);
        }
        let h = trunk_act.last().unwrap();

        let mut density_pre = vec![0.0; n];
        layout.density.forward(p, h, n, &mut density_pre);
        let densities = density_pre.iter().map(|&v| softplus(v)).collect();

        let mut feature = vec![0.0; n * w];
        layout.feature.forward(p, h, n, &mut feature);

        let view_dim = w + dir_dim;
        let mut view_in = vec![0.0; n * view_dim];
        let shared_dir = (dirs.len() == 1).then(|| positional_encoding(&dirs[0], arch.dir_freqs));
        for (i, row) in view_in.chunks_exact_mut(view_dim).enumerate() {
            row[..w].copy_from_slice(&feature[i * w..(i + 1) * w]);
            match &shared_dir {
                Some(enc) => row[w..].copy_from_slice(enc),
                None => encode_into(&dirs[i], arch.dir_freqs, &mut row[w..]),
            }
        }
        let mut view_pre = vec![0.0; n * vw];
        layout.view.forward(p, &view_in, n, &mut view_pre);
        let mut view_act = vec![0.0; n * vw];
        for (a, v) in view_act.iter_mut().zip(view_pre.iter_mut()) {
            (*a, *v) = hidden(*v);
        }
        let view_slope = view_pre;

        let mut color_pre = vec![0.0; n * 3];
        layout.color.forward(p, &view_act, n, &mut color_pre);
        let colors = color_pre
            .chunks_exact(3)
            .map(|c| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])])
            .collect();

        FieldTape {
            n,
            positions: positions.iter().flatten().copied().collect(),
            x_enc,
            trunk_slope,
            trunk_act,
            density_pre,
            view_in,
            view_slope,
            view_act,
            colors,
            densities,
        }
    }

    /// Reverse pass: accumulates parameter gradients into `grads` and returns
    /// the cotangent on each input position.
    pub fn backward(
        &self,
        tape: &FieldTape,
        d_color: &[[f64; 3]],
        d_density: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<[f64; 3]>> {
        self.reverse(tape, d_color, d_density, grads, true)
    }

    /// [`Self::backward`] without the input cotangents.
    pub fn backward_params(
        &self,
        tape: &FieldTape,
        d_color: &[[f64; 3]],
        d_density: &[f64],
        grads: &mut [f64],
    ) -> Result<()> {
        self.reverse(tape, d_color, d_density, grads, false).map(|_| ())
    }

    fn reverse(
        &self,
        tape: &FieldTape,
        d_color: &[[f64; 3]],
        d_density: &[f64],
        grads: &mut [f64],
        with_inputs: bool,
    ) -> Result<Vec<[f64; 3]>> {
        let n = tape.n;
        if d_color.len() != n || d_density.len() != n {
            return Err(Error::shape(
                format!("{n} color and density cotangents"),
                format!("{} and {}", d_color.len(), d_density.len()),
            ));
        }
        if grads.len() != self.values.len() {
            return Err(Error::shape(self.values.len(), grads.len()));
        }
        let arch = &self.arch;
        let layout = Layout::new(arch);
        let p = &self.values;
        let w = arch.hidden_width;
        let (pos_dim, dir_dim, vw) = (arch.pos_dim(), arch.dir_dim(), arch.view_width());

        // color = sigmoid(pre): d pre = dc * c (1 - c)
        let mut d_color_pre = vec![0.0; n * 3];
        for ((out, c), dc) in d_color_pre.chunks_exact_mut(3).zip(&tape.colors).zip(d_color) {
            for k in 0..3 {
                out[k] = dc[k] * c[k] * (1.0 - c[k]);
            }
        }
        let mut d_view_act = vec![0.0; n * vw];
        layout
            .color
            .backward(p, &tape.view_act, &d_color_pre, n, grads, Some(&mut d_view_act));
        let d_view_pre: Vec<f64> = d_view_act.iter().zip(&tape.view_slope).map(|(g, s)| g * s).collect();
        let view_dim = w + dir_dim;
        let mut d_view_in = vec![0.0; n * view_dim];
        layout
            .view
            .backward(p, &tape.view_in, &d_view_pre, n, grads, Some(&mut d_view_in));
        let mut d_feature = vec![0.0; n * w];
        for (dst, src) in d_feature.chunks_exact_mut(w).zip(d_view_in.chunks_exact(view_dim)) {
            dst.copy_from_slice(&src[..w]);
        }

        let h = tape.trunk_act.last().unwrap();
        let mut d_h = vec![0.0; n * w];
        layout.feature.backward(p, h, &d_feature, n, grads, Some(&mut d_h));
        let d_density_pre: Vec<f64> = d_density
            .iter()
            .zip(&tape.density_pre)
            .map(|(g, &pre)| g * sigmoid(pre))
            .collect();
        let mut d_h_density = vec![0.0; n * w];
        layout
            .density
            .backward(p, h, &d_density_pre, n, grads, Some(&mut d_h_density));
        for (a, b) in d_h.iter_mut().zip(&d_h_density) {
            *a += b;
        }

        let mut d_act = d_h;
        let mut d_x_enc = vec![0.0; n * pos_dim];
        for l in (0..layout.trunk.len()).rev() {
            let d_pre: Vec<f64> = d_act.iter().zip(&tape.trunk_slope[l]).map(|(g, s)| g * s).collect();
            if l == 0 {
                let dx = with_inputs.then_some(&mut d_x_enc[..]);
                layout.trunk[0].backward(p, &tape.x_enc, &d_pre, n, grads, dx);
                if !with_inputs {
                    return Ok(Vec::new());
                }
            } else {
                let mut d_prev = vec![0.0; n * w];
                layout.trunk[l].backward(p, &tape.trunk_act[l - 1], &d_pre, n, grads, Some(&mut d_prev));
                d_act = d_prev;
            }
        }

        let mut d_pos = vec![[0.0; 3]; n];
        for (i, out) in d_pos.iter_mut().enumerate() {
            encode_backward(
                &tape.positions[i * 3..i * 3 + 3],
                arch.pos_freqs,
                &d_x_enc[i * pos_dim..(i + 1) * pos_dim],
                out,
            );
        }
        Ok(d_pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_arch() -> FieldArch {
        FieldArch {
            hidden_layers: 2,
            hidden_width: 8,
            pos_freqs: 3,
            dir_freqs: 1,
        }
    }

    fn unit(v: [f64; 3]) -> [f64; 3] {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    }

    #[test]
    fn encoding_examples() {
        assert_eq!(positional_encoding(&[0.0], 2), vec![0.0, 0.0, 1.0, 0.0, 1.0]);
        let e = positional_encoding(&[0.5], 1);
        assert_eq!(e[0], 0.5);
        assert!((e[1] - 1.0).abs() < 1e-15);
        assert!(e[2].abs() < 1e-15);
        assert_eq!(positional_encoding(&[0.1, 0.2, 0.3], 6).len(), 39);
    }

    #[test]
    fn zero_color_layer_gives_mid_gray() {
        let mut params = init_params(&small_arch(), 3).unwrap();
        let range = params.color_layer_range();
        params.values[range].iter_mut().for_each(|v| *v = 0.0);
        let out = params.forward([0.3, -1.0, 2.0], unit([0.1, 0.2, 1.0])).unwrap();
        assert_eq!(out.color, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn density_is_nonnegative_and_forward_is_deterministic() {
        let params = init_params(&FieldArch::default(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ];
            let d = unit([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0]);
            let a = params.forward(x, d).unwrap();
            assert!(a.density >= 0.0);
            assert!(a.color.iter().all(|c| (0.0..=1.0).contains(c)));
            let b = params.forward(x, d).unwrap();
            assert_eq!(a.color.map(f64::to_bits), b.color.map(f64::to_bits));
            assert_eq!(a.density.to_bits(), b.density.to_bits());
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let params = init_params(&small_arch(), 1).unwrap();
        assert!(params.forward([f64::NAN, 0.0, 0.0], [0.0, 0.0, 1.0]).is_err());
        assert!(params.forward([0.0; 3], [0.0, 0.0, 1.1]).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let arch = FieldArch::default();
        let a = init_params(&arch, 7).unwrap();
        assert_eq!(a, init_params(&arch, 7).unwrap());
        assert_ne!(a, init_params(&arch, 8).unwrap());
        let mut offset = 0;
        for (_, inputs, outputs) in arch.dense_shapes() {
            let bound = (6.0 / inputs as f64).sqrt();
            for v in &a.values[offset..offset + inputs * outputs + outputs] {
                assert!(v.is_finite() && v.abs() <= bound);
            }
            offset += inputs * outputs + outputs;
        }
        assert_eq!(offset, a.len());
    }

    #[test]
    fn zero_cotangents_give_zero_gradients() {
        let params = init_params(&small_arch(), 2).unwrap();
        let tape = params.forward_batch(&[[0.1, 0.2, 0.3], [0.5, -0.2, 1.0]], &[unit([0.0, 0.1, 1.0])]);
        let mut g = vec![0.0; params.len()];
        let dx = params.backward(&tape, &[[0.0; 3]; 2], &[0.0; 2], &mut g).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(dx.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_cotangents() {
        let params = init_params(&small_arch(), 2).unwrap();
        let tape = params.forward_batch(&[[0.1, 0.2, 0.3]], &[[0.0, 0.0, 1.0]]);
        let mut g = vec![0.0; params.len()];
        assert!(params.backward(&tape, &[[0.0; 3]; 2], &[0.0], &mut g).is_err());
    }

    /// Scalar objective used by the finite-difference checks.
    fn objective(params: &RadianceFieldParams, xs: &[[f64; 3]], ds: &[[f64; 3]], wc: &[[f64; 3]], wd: &[f64]) -> f64 {
        let tape = params.forward_batch(xs, ds);
        let mut s = 0.0;
        for i in 0..xs.len() {
            for k in 0..3 {
                s += wc[i][k] * tape.colors[i][k];
            }
            s += wd[i] * tape.densities[i];
        }
        s
    }

    #[test]
    fn parameter_and_input_gradients_match_finite_differences() {
        let params = init_params(&small_arch(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 6;
        let xs: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.5..2.0),
                ]
            })
            .collect();
        let ds: Vec<[f64; 3]> = (0..n)
            .map(|_| unit([rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 1.0]))
            .collect();
        let wc: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let wd: Vec<f64> = (0..n).map(|_| rng.gen()).collect();

        let tape = params.forward_batch(&xs, &ds);
        let mut grads = vec![0.0; params.len()];
        let dx = params.backward(&tape, &wc, &wd, &mut grads).unwrap();

        let h = 1e-4;
        for _ in 0..20 {
            let i = rng.gen_range(0..params.len());
            let mut plus = params.clone();
            plus.values[i] += h;
            let mut minus = params.clone();
            minus.values[i] -= h;
            let numeric = (objective(&plus, &xs, &ds, &wc, &wd) - objective(&minus, &xs, &ds, &wc, &wd)) / (2.0 * h);
            let rel = (grads[i] - numeric).abs() / numeric.abs().max(1e-8);
            assert!(rel < 1e-5, "param {i}: {} vs {numeric}", grads[i]);
        }
        // five-point stencil: the encoding's high frequencies make the
        // three-point truncation error visible at this tolerance
        for s in 0..n {
            for c in 0..3 {
                let at = |offset: f64| {
                    let mut x = xs.clone();
                    x[s][c] += offset;
                    objective(&params, &x, &ds, &wc, &wd)
                };
                let numeric = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
                let rel = (dx[s][c] - numeric).abs() / numeric.abs().max(1e-6);
                assert!(rel < 1e-5, "x[{s}][{c}]: {} vs {numeric}", dx[s][c]);
            }
        }
    }
}
