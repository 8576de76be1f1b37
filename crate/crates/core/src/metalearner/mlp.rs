//! Forward pass, cross-entropy gradient, and the exact Hessian-vector
//! product (forward-over-reverse R-operator) for the ELU network.

use super::model::{LayerShape, ModelParams};
use crate::datasets::Dataset;
use crate::error::{Error, Result};

#[inline]
fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

#[inline]
fn elu_prime(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

#[inline]
fn elu_second(z: f64) -> f64 {
    if z > 0.0 {
        0.0
    } else {
        z.exp()
    }
}

/// `out = W x + b` for one layer.
fn affine(values: &[f64], layer: &LayerShape, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let w = &values[layer.weight_offset..layer.bias_offset];
    let b = &values[layer.bias_offset..layer.bias_offset + layer.outputs];
    for (row, bias) in w.chunks_exact(layer.inputs).zip(b) {
        out.push(bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>());
    }
}

/// `out = Wᵀ d`.
fn affine_transpose(values: &[f64], layer: &LayerShape, d: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.resize(layer.inputs, 0.0);
    let w = &values[layer.weight_offset..layer.bias_offset];
    for (row, &di) in w.chunks_exact(layer.inputs).zip(d) {
        if di != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * di;
            }
        }
    }
}

/// Accumulates `scale * d ⊗ a` into the weight block and `scale * d` into the bias.
fn accumulate_outer(grad: &mut [f64], layer: &LayerShape, d: &[f64], a: &[f64], scale: f64) {
    let (w, rest) = grad[layer.weight_offset..].split_at_mut(layer.inputs * layer.outputs);
    for (row, &di) in w.chunks_exact_mut(layer.inputs).zip(d) {
        let s = di * scale;
        if s != 0.0 {
            for (g, &x) in row.iter_mut().zip(a) {
                *g += s * x;
            }
        }
    }
    for (g, &di) in rest[..layer.outputs].iter_mut().zip(d) {
        *g += di * scale;
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    z.iter_mut().for_each(|v| *v /= total);
}

/// Pre-activations and activations of one sample.
struct Trace {
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`
    /// (ELU for hidden layers, raw logits for the last).
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn trace(params: &ModelParams, layers: &[LayerShape], x: &[f64]) -> Trace {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    let mut pre = Vec::with_capacity(layers.len());
    acts.push(x.to_vec());
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let mut z = Vec::with_capacity(layer.outputs);
        affine(params.values(), layer, &acts[l], &mut z);
        let a = if l == last {
            z.clone()
        } else {
            z.iter().map(|&v| elu(v)).collect()
        };
        pre.push(z);
        acts.push(a);
    }
    Trace { acts, pre }
}

fn check_batch(params: &ModelParams, data: &Dataset, batch: &[usize]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    if data.feature_dim() != params.arch().input_dim() {
        return Err(Error::ShapeMismatch {
            expected: params.arch().input_dim(),
            found: data.feature_dim(),
        });
    }
    if data.num_classes() > params.arch().num_classes() {
        return Err(Error::ShapeMismatch {
            expected: params.arch().num_classes(),
            found: data.num_classes(),
        });
    }
    Ok(())
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Logits for every sample in `batch` and the mean cross-entropy.
pub fn forward(params: &ModelParams, data: &Dataset, batch: &[usize]) -> Result<(Vec<Vec<f64>>, f64)> {
    check_batch(params, data, batch)?;
    let layers = params.arch().layers();
    let mut loss = 0.0;
    let logits = batch
        .iter()
        .map(|&i| {
            let mut t = trace(params, &layers, data.features(i));
            let z = t.acts.pop().expect("output layer");
            loss += cross_entropy(&z, data.label(i));
            z
        })
        .collect();
    Ok((logits, loss / batch.len() as f64))
}

pub fn loss(params: &ModelParams, data: &Dataset, batch: &[usize]) -> Result<f64> {
    forward(params, data, batch).map(|(_, l)| l)
}

/// Mean cross-entropy and its gradient over `batch`.
pub fn loss_and_grad(params: &ModelParams, data: &Dataset, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_batch(params, data, batch)?;
    let layers = params.arch().layers();
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut back = Vec::new();
    for &i in batch {
        let t = trace(params, &layers, data.features(i));
        let label = data.label(i);
        let mut delta = t.acts[layers.len()].clone();
        loss += cross_entropy(&delta, label);
        softmax_in_place(&mut delta);
        delta[label] -= 1.0;
        for l in (0..layers.len()).rev() {
            accumulate_outer(&mut grad, &layers[l], &delta, &t.acts[l], scale);
            if l > 0 {
                affine_transpose(params.values(), &layers[l], &delta, &mut back);
                delta = back.iter().zip(&t.pre[l - 1]).map(|(g, &z)| g * elu_prime(z)).collect();
            }
        }
    }
    Ok((loss * scale, grad))
}

pub fn grad(params: &ModelParams, data: &Dataset, batch: &[usize]) -> Result<Vec<f64>> {
    loss_and_grad(params, data, batch).map(|(_, g)| g)
}

/// Exact `∇²f(θ) v` for the mean cross-entropy over `batch`.
pub fn hessian_vector(params: &ModelParams, data: &Dataset, batch: &[usize], v: &[f64]) -> Result<Vec<f64>> {
    check_batch(params, data, batch)?;
    if v.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            found: v.len(),
        });
    }
    let layers = params.arch().layers();
    let n_layers = layers.len();
    let scale = 1.0 / batch.len() as f64;
    let mut hv = vec![0.0; params.len()];
    let mut tmp = Vec::new();
    let mut tmp2 = Vec::new();
    for &i in batch {
        let t = trace(params, &layers, data.features(i));

        // R-forward: directional derivatives of pre-activations and activations.
        let mut r_acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        let mut r_pre: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        r_acts.push(vec![0.0; layers[0].inputs]);
        for (l, layer) in layers.iter().enumerate() {
            // R{z} = W R{a} + V a + c
            affine(params.values(), layer, &r_acts[l], &mut tmp);
            affine(v, layer, &t.acts[l], &mut tmp2);
            // Both calls added a bias; W R{a} must not carry b.
            let b = &params.values()[layer.bias_offset..layer.bias_offset + layer.outputs];
            let rz: Vec<f64> = tmp
                .iter()
                .zip(&tmp2)
                .zip(b)
                .map(|((x, y), bias)| x - bias + y)
                .collect();
            let ra = if l + 1 == n_layers {
                rz.clone()
            } else {
                rz.iter().zip(&t.pre[l]).map(|(r, &z)| r * elu_prime(z)).collect()
            };
            r_pre.push(rz);
            r_acts.push(ra);
        }

        // Output layer: delta = p - y, R{delta} = (diag(p) - p pᵀ) R{z}.
        let label = data.label(i);
        let mut p = t.acts[n_layers].clone();
        softmax_in_place(&mut p);
        let rz_out = &r_pre[n_layers - 1];
        let dot: f64 = p.iter().zip(rz_out).map(|(a, b)| a * b).sum();
        let mut r_delta: Vec<f64> = p.iter().zip(rz_out).map(|(pi, r)| pi * (r - dot)).collect();
        let mut delta = p;
        delta[label] -= 1.0;

        for l in (0..n_layers).rev() {
            accumulate_outer(&mut hv, &layers[l], &r_delta, &t.acts[l], scale);
            accumulate_outer(&mut hv, &layers[l], &delta, &r_acts[l], scale);
            // Bias gets R{delta} only; undo the duplicate added above.
            let bias = &mut hv[layers[l].bias_offset..layers[l].bias_offset + layers[l].outputs];
            for (h, d) in bias.iter_mut().zip(&delta) {
                *h -= d * scale;
            }
            if l > 0 {
                // da = Wᵀ delta ; R{da} = Vᵀ delta + Wᵀ R{delta}
                affine_transpose(params.values(), &layers[l], &delta, &mut tmp);
                affine_transpose(v, &layers[l], &delta, &mut tmp2);
                let mut r_da = Vec::new();
                affine_transpose(params.values(), &layers[l], &r_delta, &mut r_da);
                let z = &t.pre[l - 1];
                let rz = &r_pre[l - 1];
                r_delta = (0..z.len())
                    .map(|k| elu_second(z[k]) * rz[k] * tmp[k] + elu_prime(z[k]) * (tmp2[k] + r_da[k]))
                    .collect();
                delta = tmp.iter().zip(z).map(|(g, &zk)| g * elu_prime(zk)).collect();
            }
        }
    }
    Ok(hv)
}

/// Symmetric finite-difference `∇²f(θ) v` with displacement `h = 1e-4 / (1 + ‖v‖)`.
pub fn hessian_vector_fd(params: &ModelParams, data: &Dataset, batch: &[usize], v: &[f64]) -> Result<Vec<f64>> {
    let h = 1e-4 / (1.0 + super::model::norm(v));
    let mut plus = params.clone();
    plus.axpy(h, v);
    let mut minus = params.clone();
    minus.axpy(-h, v);
    let gp = grad(&plus, data, batch)?;
    let gm = grad(&minus, data, batch)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// Mean activation of the last hidden layer over `batch`.
pub fn embedding(params: &ModelParams, data: &Dataset, batch: &[usize]) -> Result<Vec<f64>> {
    check_batch(params, data, batch)?;
    let layers = params.arch().layers();
    let hidden = layers.len() - 1;
    let mut mean = vec![0.0; params.arch().embedding_dim()];
    for &i in batch {
        let t = trace(params, &layers, data.features(i));
        for (m, a) in mean.iter_mut().zip(&t.acts[hidden]) {
            *m += a;
        }
    }
    mean.iter_mut().for_each(|m| *m /= batch.len() as f64);
    Ok(mean)
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn accuracy(params: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let (logits, _) = forward(params, data, &all)?;
    let correct = logits
        .iter()
        .zip(data.labels())
        .filter(|(z, &y)| {
            let pred = z
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (k, &v)| if v > best.1 { (k, v) } else { best },
                )
                .0;
            pred == y
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}
