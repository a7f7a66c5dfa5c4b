use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

use super::{MixerConfig, MixerParams, Segment, ROT_OUTPUTS};
use crate::error::{Error, Result};
use crate::names::NUM_BLENDSHAPES;

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Flat parameter-shaped gradient.
pub type Gradient = Vec<f64>;

fn gelu(a: f64) -> f64 {
    0.5 * a * (1.0 + (GELU_K * (a + GELU_C * a * a * a)).tanh())
}

fn gelu_grad(a: f64) -> f64 {
    let t = (GELU_K * (a + GELU_C * a * a * a)).tanh();
    0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * a * a)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mat(data: &[f64], s: Segment) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &data[s.range()]).expect("segment shape")
}

fn mat_mut(data: &mut [f64], s: Segment) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut data[s.range()]).expect("segment shape")
}

fn row(data: &[f64], s: Segment) -> ArrayView1<'_, f64> {
    ArrayView1::from(&data[s.range()])
}

fn row_mut(data: &mut [f64], s: Segment) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut data[s.range()])
}

/// `C += A B`.
fn add_mm(c: &mut ArrayViewMut2<f64>, a: &ArrayView2<f64>, b: &ArrayView2<f64>) {
    general_mat_mul(1.0, a, b, 1.0, c);
}

fn check(x: &Array2<f64>, layer: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activations after {layer}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerOutput {
    /// Sigmoid outputs, one per blendshape.
    pub coefficients: Vec<f64>,
    /// Raw 6D rotation, decoded downstream.
    pub r6: [f64; ROT_OUTPUTS],
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
struct BlockActs {
    norm1: NormCache,
    u: Array2<f64>,
    token_pre: Array2<f64>,
    token_hidden: Array2<f64>,
    norm2: NormCache,
    v: Array2<f64>,
    channel_pre: Array2<f64>,
    channel_hidden: Array2<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    input: Array2<f64>,
    embedded: Array2<f64>,
    blocks: Vec<BlockActs>,
    flat: Array1<f64>,
    output: MixerOutput,
}

impl Activations {
    pub fn output(&self) -> &MixerOutput {
        &self.output
    }

    pub fn into_output(self) -> MixerOutput {
        self.output
    }
}

/// Row-wise layer normalization over channels.
fn layer_norm(
    x: &Array2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, NormCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut r, inv) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = r.sum() / n;
        r.mapv_inplace(|v| v - mean);
        let var = r.iter().map(|v| v * v).sum::<f64>() / n;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let s = *inv;
        r.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &gain + bias;
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gain: ArrayView1<f64>,
    mut dgain: ArrayViewMut1<f64>,
    mut dbias: ArrayViewMut1<f64>,
) -> Array2<f64> {
    dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    dbias += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let dxhat = dy * &gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &inv) in dx
        .axis_iter_mut(Axis(0))
        .zip(dxhat.axis_iter(Axis(0)))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(&cache.inv_std)
    {
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(xh) {
            *o = inv / n * (n * gi - sum_g - xi * sum_gx);
        }
    }
    dx
}

/// Fixed multiplier on the flattened latent fed to both heads. It keeps the
/// per-step change of each head output independent of the latent size under
/// Adam.
pub fn head_scale(c: &MixerConfig) -> f64 {
    1.0 / ((c.latent_tokens * c.latent_channels) as f64).sqrt()
}

/// Centers landmarks at their centroid and divides by the distance between
/// the configured inter-ocular pair.
pub fn normalize_input(params: &MixerParams, landmarks: &[[f64; 2]]) -> Result<Array2<f64>> {
    let c = params.config();
    if c.channels_in != 2 || landmarks.len() != c.tokens_in {
        return Err(Error::ShapeMismatch(format!(
            "input is {}x2, mixer expects {}x{}",
            landmarks.len(),
            c.tokens_in,
            c.channels_in
        )));
    }
    let n = landmarks.len() as f64;
    let cx = landmarks.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = landmarks.iter().map(|p| p[1]).sum::<f64>() / n;
    let [a, b] = c.interocular_pair;
    let io = (landmarks[a][0] - landmarks[b][0]).hypot(landmarks[a][1] - landmarks[b][1]);
    if !(io > 0.0) || !io.is_finite() {
        return Err(Error::ZeroInterocular);
    }
    Ok(Array2::from_shape_fn((landmarks.len(), 2), |(i, j)| {
        (landmarks[i][j] - if j == 0 { cx } else { cy }) / io
    }))
}

/// Forward pass on a normalized `tokens_in x channels_in` input.
pub fn forward(params: &MixerParams, input: &Array2<f64>) -> Result<Activations> {
    let c = params.config();
    let l = params.layout();
    let d = &params.data;
    if input.dim() != (c.tokens_in, c.channels_in) {
        return Err(Error::ShapeMismatch(format!(
            "input is {:?}, mixer expects ({}, {})",
            input.dim(),
            c.tokens_in,
            c.channels_in
        )));
    }
    check(input, "input")?;
    let embedded = input.dot(&mat(d, l.embed_w)) + mat(d, l.embed_b);
    check(&embedded, "embed")?;
    let mut z = mat(d, l.proj_w).dot(&embedded) + mat(d, l.proj_b);
    check(&z, "token_proj")?;
    debug_assert_eq!(z.dim(), (c.latent_tokens, c.latent_channels));
    let mut blocks = Vec::with_capacity(l.blocks.len());
    for (i, b) in l.blocks.iter().enumerate() {
        let (u, norm1) = layer_norm(&z, row(d, b.ln1_gain), row(d, b.ln1_bias));
        let token_pre = mat(d, b.token_w1).dot(&u) + mat(d, b.token_b1);
        let token_hidden = token_pre.mapv(gelu);
        z += &(mat(d, b.token_w2).dot(&token_hidden) + mat(d, b.token_b2));
        check(&z, &format!("blocks.{i}.token_mlp"))?;
        let (v, norm2) = layer_norm(&z, row(d, b.ln2_gain), row(d, b.ln2_bias));
        let channel_pre = v.dot(&mat(d, b.channel_w1)) + mat(d, b.channel_b1);
        let channel_hidden = channel_pre.mapv(gelu);
        z += &(channel_hidden.dot(&mat(d, b.channel_w2)) + mat(d, b.channel_b2));
        check(&z, &format!("blocks.{i}.channel_mlp"))?;
        blocks.push(BlockActs {
            norm1,
            u,
            token_pre,
            token_hidden,
            norm2,
            v,
            channel_pre,
            channel_hidden,
        });
    }
    let scale = head_scale(c);
    let flat = Array1::from_iter(z.iter().map(|v| v * scale));
    let logits = mat(d, l.coef_w).dot(&flat) + row(d, l.coef_b);
    let r6 = mat(d, l.rot_w).dot(&flat) + row(d, l.rot_b);
    let coefficients: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
    if coefficients.iter().chain(r6.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("activations after heads".into()));
    }
    debug_assert_eq!(coefficients.len(), NUM_BLENDSHAPES);
    Ok(Activations {
        input: input.clone(),
        embedded,
        blocks,
        flat,
        output: MixerOutput {
            coefficients,
            r6: r6.to_vec().try_into().expect("six rotation outputs"),
        },
    })
}

/// Normalizes raw pixel landmarks and runs the network.
pub fn infer(params: &MixerParams, landmarks: &[[f64; 2]]) -> Result<MixerOutput> {
    Ok(forward(params, &normalize_input(params, landmarks)?)?.into_output())
}

/// Accumulates into `grad` the parameter gradient of a scalar whose
/// derivatives with respect to the coefficient outputs and the raw rotation
/// outputs are `d_coef` and `d_r6`.
pub(crate) fn backward(
    params: &MixerParams,
    act: &Activations,
    d_coef: &[f64],
    d_r6: &[f64; 6],
    grad: &mut [f64],
) {
    let l = params.layout();
    let d = &params.data;
    let c = params.config();
    let d_logit = Array1::from_iter(
        act.output
            .coefficients
            .iter()
            .zip(d_coef)
            .map(|(&w, &g)| g * w * (1.0 - w)),
    );
    let d_rot = ArrayView1::from(&d_r6[..]);
    let flat_row = act.flat.view().insert_axis(Axis(0));
    add_mm(
        &mut mat_mut(grad, l.coef_w),
        &d_logit.view().insert_axis(Axis(1)),
        &flat_row,
    );
    row_mut(grad, l.coef_b).scaled_add(1.0, &d_logit);
    add_mm(
        &mut mat_mut(grad, l.rot_w),
        &d_rot.insert_axis(Axis(1)),
        &flat_row,
    );
    row_mut(grad, l.rot_b).scaled_add(1.0, &d_rot);
    let d_flat =
        (mat(d, l.coef_w).t().dot(&d_logit) + mat(d, l.rot_w).t().dot(&d_rot)) * head_scale(c);
    let mut dz = d_flat
        .into_shape_with_order((c.latent_tokens, c.latent_channels))
        .expect("latent shape");

    for (b, a) in l.blocks.iter().zip(&act.blocks).rev() {
        // Channel MLP: z += gelu(v W1 + b1) W2 + b2.
        add_mm(
            &mut mat_mut(grad, b.channel_w2),
            &a.channel_hidden.t(),
            &dz.view(),
        );
        row_mut(grad, b.channel_b2).scaled_add(1.0, &dz.sum_axis(Axis(0)));
        let mut dpre = dz.dot(&mat(d, b.channel_w2).t());
        dpre.zip_mut_with(&a.channel_pre, |g, &x| *g *= gelu_grad(x));
        add_mm(&mut mat_mut(grad, b.channel_w1), &a.v.t(), &dpre.view());
        row_mut(grad, b.channel_b1).scaled_add(1.0, &dpre.sum_axis(Axis(0)));
        let dv = dpre.dot(&mat(d, b.channel_w1).t());
        let (dg, db) = split_pair(grad, b.ln2_gain, b.ln2_bias);
        dz += &layer_norm_backward(&dv, &a.norm2, row(d, b.ln2_gain), dg, db);

        // Token MLP: z += W2 gelu(W1 u + b1) + b2.
        add_mm(
            &mut mat_mut(grad, b.token_w2),
            &dz.view(),
            &a.token_hidden.t(),
        );
        row_mut(grad, b.token_b2).scaled_add(1.0, &dz.sum_axis(Axis(1)));
        let mut dpre = mat(d, b.token_w2).t().dot(&dz);
        dpre.zip_mut_with(&a.token_pre, |g, &x| *g *= gelu_grad(x));
        add_mm(&mut mat_mut(grad, b.token_w1), &dpre.view(), &a.u.t());
        row_mut(grad, b.token_b1).scaled_add(1.0, &dpre.sum_axis(Axis(1)));
        let du = mat(d, b.token_w1).t().dot(&dpre);
        let (dg, db) = split_pair(grad, b.ln1_gain, b.ln1_bias);
        dz += &layer_norm_backward(&du, &a.norm1, row(d, b.ln1_gain), dg, db);
    }

    add_mm(&mut mat_mut(grad, l.proj_w), &dz.view(), &act.embedded.t());
    row_mut(grad, l.proj_b).scaled_add(1.0, &dz.sum_axis(Axis(1)));
    let de = mat(d, l.proj_w).t().dot(&dz);
    add_mm(&mut mat_mut(grad, l.embed_w), &act.input.t(), &de.view());
    row_mut(grad, l.embed_b).scaled_add(1.0, &de.sum_axis(Axis(0)));
}

/// Mutable views of two adjacent segments (`first` directly before `second`).
fn split_pair(
    grad: &mut [f64],
    first: Segment,
    second: Segment,
) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
    debug_assert_eq!(first.offset + first.len(), second.offset);
    let (a, b) = grad[first.offset..second.offset + second.len()].split_at_mut(first.len());
    (ArrayViewMut1::from(a), ArrayViewMut1::from(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::MixerConfig;

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for &a in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(a + h) - gelu(a - h)) / (2.0 * h);
            assert!((gelu_grad(a) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_network_outputs_one_half() {
        let p = MixerParams::zeros(MixerConfig::default()).unwrap();
        let x = Array2::from_shape_fn((146, 2), |(i, j)| (i * 2 + j) as f64 * 0.01);
        let out = forward(&p, &x).unwrap().into_output();
        assert_eq!(out.coefficients.len(), 52);
        assert!(out.coefficients.iter().all(|&w| w == 0.5));
        assert_eq!(out.r6, [0.0; 6]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = MixerParams::zeros(MixerConfig::desk()).unwrap();
        assert!(matches!(
            forward(&p, &Array2::zeros((145, 2))),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            infer(&p, &[[0.0, 0.0]; 10]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn non_finite_activation_names_the_layer() {
        let mut p = MixerParams::init(MixerConfig::desk(), 0).unwrap();
        let s = p.layout().blocks[1].channel_w2;
        p.data[s.offset] = f64::INFINITY;
        let x = Array2::from_shape_fn((146, 2), |(i, j)| ((i + j) as f64).sin());
        match forward(&p, &x) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("blocks.1.channel_mlp"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn normalization_is_translation_and_scale_invariant() {
        let p = MixerParams::zeros(MixerConfig::default()).unwrap();
        let pts: Vec<[f64; 2]> = (0..146)
            .map(|i| [(i as f64).cos() * 40.0, (i as f64 * 0.3).sin() * 30.0])
            .collect();
        let moved: Vec<[f64; 2]> = pts
            .iter()
            .map(|p| [p[0] * 2.5 + 7.0, p[1] * 2.5 - 3.0])
            .collect();
        let a = normalize_input(&p, &pts).unwrap();
        let b = normalize_input(&p, &moved).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(
            normalize_input(&p, &[[1.0, 1.0]; 146]),
            Err(Error::ZeroInterocular)
        ));
    }
}
