//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use facedodge::autodiff::{forward, ComputationGraph, Layer, Tensor};
use facedodge::image::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(seed: u64, width: usize, height: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..width * height * 3).map(|_| rng.random::<f64>()).collect();
    Image::new(width, height, data).unwrap()
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Evaluates a layer graph with plain nested loops, independently of the
/// library's forward pass. Activations are `[h, w, c]` row-major.
pub fn naive_forward(graph: &ComputationGraph, input: &[f64]) -> Vec<f64> {
    let mut shape = graph.input_shape().to_vec();
    let mut x = input.to_vec();
    for layer in graph.layers() {
        match layer {
            Layer::Conv2d { weight, stride, padding } => {
                let w = graph.weight(weight).unwrap();
                let (oc, kh, kw, ic) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                let (h, wd) = (shape[0] as isize, shape[1] as isize);
                let oh = ((h + 2 * *padding as isize - kh as isize) / *stride as isize + 1) as usize;
                let ow = ((wd + 2 * *padding as isize - kw as isize) / *stride as isize + 1) as usize;
                let mut out = vec![0.0; oh * ow * oc];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for o in 0..oc {
                            let mut s = 0.0;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - *padding as isize;
                                    let ix = (ox * stride + kx) as isize - *padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h || ix >= wd {
                                        continue;
                                    }
                                    for c in 0..ic {
                                        s += w.data()[((o * kh + ky) * kw + kx) * ic + c]
                                            * x[((iy * wd + ix) as usize) * ic + c];
                                    }
                                }
                            }
                            out[(oy * ow + ox) * oc + o] = s;
                        }
                    }
                }
                x = out;
                shape = vec![oh, ow, oc];
            }
            Layer::BiasAdd { bias } => {
                let b = graph.weight(bias).unwrap().data();
                let c = b.len();
                for (i, v) in x.iter_mut().enumerate() {
                    *v += b[i % c];
                }
            }
            Layer::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Layer::MaxPool { size, stride } => {
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let oh = (h - size) / stride + 1;
                let ow = (w - size) / stride + 1;
                let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    let v = x[((oy * stride + dy) * w + ox * stride + dx) * c + ch];
                                    let o = &mut out[(oy * ow + ox) * c + ch];
                                    *o = o.max(v);
                                }
                            }
                        }
                    }
                }
                x = out;
                shape = vec![oh, ow, c];
            }
            Layer::Flatten => shape = vec![x.len()],
            Layer::Dense { weight } => {
                let w = graph.weight(weight).unwrap();
                let (o, i) = (w.shape()[0], w.shape()[1]);
                x = (0..o)
                    .map(|r| (0..i).map(|k| w.data()[r * i + k] * x[k]).sum())
                    .collect();
                shape = vec![o];
            }
            Layer::L2Normalize => {
                let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                x.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
    x
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// A random conv/pool/dense stack with every ReLU input and every max-pool
/// window at least `margin` away from a kink, or `None` when the draw fails
/// that condition.
pub fn random_graph(seed: u64, margin: f64) -> Option<(ComputationGraph, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(4..=7);
    let w = rng.random_range(4..=7);
    let c = rng.random_range(1..=3);
    let oc = rng.random_range(2..=3);
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let mut weights = BTreeMap::new();
    weights.insert("c1".to_string(), random_tensor(&mut rng, vec![oc, k, k, c], 0.6));
    weights.insert("b1".to_string(), random_tensor(&mut rng, vec![oc], 0.2));
    let mut layers = vec![
        Layer::Conv2d {
            weight: "c1".into(),
            stride,
            padding: k / 2,
        },
        Layer::BiasAdd { bias: "b1".into() },
        Layer::Relu,
    ];
    let pool = rng.random_bool(0.5);
    if pool {
        layers.push(Layer::MaxPool { size: 2, stride: 2 });
    }
    layers.push(Layer::Flatten);
    let probe = ComputationGraph::new(vec![h, w, c], layers.clone(), weights.clone()).ok()?;
    let flat: usize = probe.output_shape().iter().product();
    if flat == 0 {
        return None;
    }
    let hidden = rng.random_range(3..=5);
    weights.insert("d1".to_string(), random_tensor(&mut rng, vec![hidden, flat], 0.5));
    layers.push(Layer::Dense { weight: "d1".into() });
    if rng.random_bool(0.5) {
        layers.push(Layer::Relu);
        weights.insert("d2".to_string(), random_tensor(&mut rng, vec![4, hidden], 0.7));
        layers.push(Layer::Dense { weight: "d2".into() });
    }
    layers.push(Layer::L2Normalize);
    let g = ComputationGraph::new(vec![h, w, c], layers, weights).ok()?;
    let x = random_tensor(&mut rng, vec![h, w, c], 1.0);

    let trace = forward(&g, &x).ok()?;
    for (i, layer) in g.layers().iter().enumerate() {
        let before = if i == 0 { trace.input() } else { &trace.outputs()[i - 1] };
        match layer {
            Layer::Relu => {
                if before.data().iter().any(|v| v.abs() < margin) {
                    return None;
                }
            }
            Layer::MaxPool { size, stride } => {
                let s = before.shape();
                let (ih, iw, ic) = (s[0], s[1], s[2]);
                for oy in 0..(ih - size) / stride + 1 {
                    for ox in 0..(iw - size) / stride + 1 {
                        for ch in 0..ic {
                            let mut vals: Vec<f64> = (0..*size)
                                .flat_map(|dy| (0..*size).map(move |dx| (dy, dx)))
                                .map(|(dy, dx)| before.data()[((oy * stride + dy) * iw + ox * stride + dx) * ic + ch])
                                .collect();
                            vals.sort_by(|a, b| b.total_cmp(a));
                            if vals[0] - vals[1] < margin {
                                return None;
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Some((g, x))
}
