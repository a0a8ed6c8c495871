//! Straight-line 64-bit reference evaluation of the model's equations, plus
//! fixtures shared by the integration tests. Nothing here calls the
//! library's graph; it only reads parameter values out of a `ParamStore`.

#![allow(dead_code)]

use bcaf::data::{Conversation, Split, Utterance};
use bcaf::{ParamStore, RngState, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn tensor_of(m: &Mat) -> Tensor<f64> {
    let data: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor::new(vec![m.len(), m[0].len()], data).unwrap()
}

pub fn param(store: &ParamStore, name: &str) -> Mat {
    let t = store.get(name).unwrap_or_else(|| panic!("missing {name}"));
    let cols = *t.shape().last().unwrap();
    t.data()
        .chunks(cols)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn vector(store: &ParamStore, name: &str) -> Vec<f64> {
    param(store, name).concat()
}

pub fn random(rng: &mut RngState, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.normal()).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn zip(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| f(*p, *q)).collect())
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    zip(a, b, |x, y| x + y)
}

pub fn sub(a: &Mat, b: &Mat) -> Mat {
    zip(a, b, |x, y| x - y)
}

pub fn scale(a: &Mat, c: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x * c).collect()).collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect()
}

pub fn affine(x: &Mat, store: &ParamStore, prefix: &str) -> Mat {
    let w = param(store, &format!("{prefix}.w"));
    let b = vector(store, &format!("{prefix}.b"));
    matmul(x, &w)
        .into_iter()
        .map(|r| r.iter().zip(&b).map(|(v, c)| v + c).collect())
        .collect()
}

pub fn identity(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

pub fn frobenius_sq(a: &Mat) -> f64 {
    a.iter().flatten().map(|x| x * x).sum()
}

/// Conversation index of every packed row.
pub fn owners(lengths: &[usize]) -> Vec<usize> {
    lengths.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect()
}

/// Row softmax over keys in the same conversation; other entries are 0.
pub fn block_softmax(scores: &Mat, lengths: &[usize]) -> Mat {
    let own = owners(lengths);
    scores
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| own[*j] == own[i])
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, v)| if own[j] == own[i] { (v - max).exp() } else { 0.0 })
                .collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

/// Single-head scaled dot-product attention; returns (weights, output).
pub fn attention(query_src: &Mat, key_src: &Mat, store: &ParamStore, prefix: &str, lengths: &[usize]) -> (Mat, Mat) {
    let q = matmul(query_src, &param(store, &format!("{prefix}.wq")));
    let k = matmul(key_src, &param(store, &format!("{prefix}.wk")));
    let v = matmul(key_src, &param(store, &format!("{prefix}.wv")));
    let dk = q[0].len() as f64;
    let a = block_softmax(&scale(&matmul(&q, &transpose(&k)), 1.0 / dk.sqrt()), lengths);
    let out = matmul(&a, &v);
    (a, out)
}

/// `LN2(x + FFN(x))` with `x = LN1(residual + update)`.
pub fn add_norm_ffn(residual: &Mat, update: &Mat, store: &ParamStore, prefix: &str, eps: f64) -> Mat {
    let ln = |x: &Mat, name: &str| {
        layer_norm(x, &vector(store, &format!("{prefix}.{name}.g")), &vector(store, &format!("{prefix}.{name}.b")), eps)
    };
    let x = ln(&add(residual, update), "ln1");
    let f = affine(&relu(&affine(&x, store, &format!("{prefix}.ff1"))), store, &format!("{prefix}.ff2"));
    ln(&add(&x, &f), "ln2")
}

pub fn self_block(h: &Mat, store: &ParamStore, prefix: &str, lengths: &[usize], eps: f64) -> Mat {
    let (_, z) = attention(h, h, store, prefix, lengths);
    add_norm_ffn(h, &z, store, prefix, eps)
}

pub fn cross_block(h_a: &Mat, h_l: &Mat, store: &ParamStore, pa: &str, pl: &str, lengths: &[usize], eps: f64) -> (Mat, Mat) {
    let (_, z_la) = attention(h_l, h_a, store, pa, lengths);
    let (_, z_al) = attention(h_a, h_l, store, pl, lengths);
    (add_norm_ffn(h_a, &z_la, store, pa, eps), add_norm_ffn(h_l, &z_al, store, pl, eps))
}

/// Encoder, decoder and the connection loss of one batch.
pub struct Connection {
    pub e_a: Mat,
    pub e_l: Mat,
    pub d_a: Mat,
    pub d_l: Mat,
    pub loss: f64,
}

pub fn connection(h_a: &Mat, h_l: &Mat, store: &ParamStore, mu: f64, normalized: bool) -> Connection {
    let enc = |h: &Mat, m: &str| {
        let mut x = h.clone();
        for i in 0..3 {
            x = relu(&affine(&x, store, &format!("icn.{m}.enc{i}")));
        }
        x
    };
    let dec = |e: &Mat, m: &str| {
        let mut x = e.clone();
        for i in 0..3 {
            x = affine(&x, store, &format!("icn.{m}.dec{i}"));
            if i < 2 {
                x = relu(&x);
            }
        }
        x
    };
    let (e_a, e_l) = (enc(h_a, "audio"), enc(h_l, "text"));
    let (d_a, d_l) = (dec(&e_a, "audio"), dec(&e_l, "text"));
    let n = |v: f64, count: usize| if normalized { v / count as f64 } else { v };
    let numel = |m: &Mat| m.len() * m[0].len();
    let recon = n(frobenius_sq(&sub(h_a, &d_a)), numel(h_a)) + n(frobenius_sq(&sub(h_l, &d_l)), numel(h_l));
    let gram = |x: &Mat, y: &Mat| {
        let g = matmul(&transpose(x), y);
        let k = g.len();
        n(frobenius_sq(&sub(&identity(k), &g)), k * k)
    };
    let loss = recon + mu * (gram(&e_a, &e_l) - gram(&d_a, &d_l));
    Connection { e_a, e_l, d_a, d_l, loss }
}

/// Joint dual-softmax attention at the given λ.
pub fn joint(s_a: &Mat, s_l: &Mat, store: &ParamStore, prefix: &str, lambda: f64, lengths: &[usize]) -> Mat {
    let p = |x: &Mat, m: &str, w: &str| matmul(x, &param(store, &format!("{prefix}.{m}.{w}")));
    let (qa, ka, va) = (p(s_a, "audio", "wq"), p(s_a, "audio", "wk"), p(s_a, "audio", "wv"));
    let (ql, kl, vl) = (p(s_l, "text", "wq"), p(s_l, "text", "wk"), p(s_l, "text", "wv"));
    let c = 1.0 / (qa[0].len() as f64).sqrt();
    let intra = block_softmax(&scale(&add(&matmul(&qa, &transpose(&ka)), &matmul(&ql, &transpose(&kl))), c), lengths);
    let cross = block_softmax(&scale(&matmul(&qa, &transpose(&kl)), c), lengths);
    let w = sub(&intra, &scale(&cross, lambda));
    matmul(&w, &scale(&add(&va, &vl), 0.5))
}

/// Cosine per row, the denominator floored at 1e-8 so a dead (all-zero)
/// latent row gives 0 rather than NaN.
pub fn cosine_rows(a: &Mat, b: &Mat) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nx * ny).max(1e-8)
        })
        .collect()
}

pub fn row_scale(a: &Mat, s: &[f64]) -> Mat {
    a.iter().zip(s).map(|(r, c)| r.iter().map(|v| v * c).collect()).collect()
}

pub fn concat(parts: &[&Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}

/// Logits of the three heads and the total objective, 1-layer BAN, eval mode.
pub struct Reference {
    pub logits_a: Mat,
    pub logits_l: Mat,
    pub logits_m: Mat,
    pub total: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn full_model(h_a: &Mat, h_l: &Mat, labels: &[usize], lengths: &[usize], store: &ParamStore, alpha: f64, beta: f64, mu: f64, eps: f64) -> Reference {
    let conn = connection(h_a, h_l, store, mu, true);
    let s_a = self_block(h_a, store, "ban.l0.self.audio", lengths, eps);
    let s_l = self_block(h_l, store, "ban.l0.self.text", lengths, eps);
    let (c_a, c_l) = cross_block(h_a, h_l, store, "ban.l0.cross.audio", "ban.l0.cross.text", lengths, eps);
    let lambda = vector(store, "can.joint.lambda")[0].clamp(-2.0, 2.0);
    let h_star = joint(&s_a, &s_l, store, "can.joint", lambda, lengths);
    let h_b = affine(&h_star, store, "can.bimodal");
    let (cor_a, cor_l) = (cosine_rows(&conn.e_a, &h_b), cosine_rows(&conn.e_l, &h_b));
    let hs_a = row_scale(&affine(&s_a, store, "can.half.audio"), &cor_a);
    let hs_l = row_scale(&affine(&s_l, store, "can.half.text"), &cor_l);
    let h_m = concat(&[&c_a, &c_l, &hs_a, &hs_l]);
    let logits_a = affine(&s_a, store, "head.audio");
    let logits_l = affine(&s_l, store, "head.text");
    let logits_m = affine(&h_m, store, "head.bimodal");
    let total = alpha * conn.loss
        + beta * (cross_entropy(&logits_a, labels) + cross_entropy(&logits_l, labels))
        + cross_entropy(&logits_m, labels);
    Reference {
        logits_a,
        logits_l,
        logits_m,
        total,
    }
}

/// Largest element-wise |a − b|.
pub fn max_diff(a: &Mat, b: &Tensor<f64>) -> f64 {
    assert_eq!(b.shape(), &[a.len(), a[0].len()], "shape mismatch");
    a.iter().flatten().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn conversation(id: &str, len: usize, d: usize, classes: usize, rng: &mut RngState) -> Conversation {
    Conversation {
        conversation_id: id.into(),
        split: Split::Train,
        utterances: (0..len)
            .map(|t| Utterance {
                utterance_id: format!("{id}#{t}"),
                audio: (0..d).map(|_| rng.normal() as f32).collect(),
                text: (0..d).map(|_| rng.normal() as f32).collect(),
                label: rng.below(classes),
            })
            .collect(),
    }
}

/// Feature rows of `convs` stacked back to back.
pub fn stacked(convs: &[Conversation]) -> (Mat, Mat, Vec<usize>, Vec<usize>) {
    let mut a = Vec::new();
    let mut l = Vec::new();
    let mut y = Vec::new();
    for c in convs {
        for u in &c.utterances {
            a.push(u.audio.iter().map(|&v| v as f64).collect());
            l.push(u.text.iter().map(|&v| v as f64).collect());
            y.push(u.label);
        }
    }
    (a, l, y, convs.iter().map(Conversation::len).collect())
}

/// Weighted F1 written directly from precision and recall, class by class.
pub fn weighted_f1_oracle(y_true: &[usize], y_pred: &[usize], classes: usize) -> f64 {
    let n = y_true.len() as f64;
    let mut total = 0.0;
    for c in 0..classes {
        let tp = y_true.iter().zip(y_pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
        let predicted = y_pred.iter().filter(|p| **p == c).count() as f64;
        let support = y_true.iter().filter(|t| **t == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if support > 0.0 { tp / support } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += f1 * support / n;
    }
    total
}
