//! Soft spatial attention: Fourier spatial basis, key/value split, query-key
//! logits, spatial softmax and the attention-weighted answer, plus the
//! analysis transforms (hard threshold, what/where, marginals).
//!
//! Tensors are `h × w × c` row-major. The functions here are plain tensor
//! code; [`head_on_graph`] records the same computation on a [`Graph`] so
//! gradients can flow through it.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{softmax, Float, Graph, NodeId, Tensor};

/// Clamp applied to `what - where` before weighting by attention.
pub const WHAT_WHERE_CLAMP: f64 = std::f64::consts::LN_10;

/// Fixed positional planes appended to keys and values.
///
/// Each axis gets `num_even` cosines `cos(pi*u*i/n)` for `u` in `0..num_even`
/// and `num_odd` sines `sin(pi*v*i/n)` for `v` in `1..=num_odd`. Channel
/// `a * k + b` (with `k = num_even + num_odd`) is the outer product of the
/// `a`-th row vector and the `b`-th column vector, so channel 0 is constant 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialBasis {
    height: usize,
    width: usize,
    num_even: usize,
    num_odd: usize,
    data: Tensor<f32>,
}

fn axis_vectors(n: usize, num_even: usize, num_odd: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(num_even + num_odd);
    for u in 0..num_even {
        out.push((0..n).map(|i| (PI * u as f64 * i as f64 / n as f64).cos()).collect());
    }
    for v in 1..=num_odd {
        out.push((0..n).map(|i| (PI * v as f64 * i as f64 / n as f64).sin()).collect());
    }
    out
}

impl SpatialBasis {
    pub fn new(height: usize, width: usize, num_even: usize, num_odd: usize) -> Result<Self> {
        if height == 0 || width == 0 || num_even == 0 || num_odd == 0 {
            return Err(Error::invalid(format!(
                "spatial basis needs positive extents and frequency counts, got h={height} w={width} U={num_even} V={num_odd}"
            )));
        }
        let rows = axis_vectors(height, num_even, num_odd);
        let cols = axis_vectors(width, num_even, num_odd);
        let k = num_even + num_odd;
        let channels = k * k;
        let mut data = vec![0.0f32; height * width * channels];
        for i in 0..height {
            for j in 0..width {
                let base = (i * width + j) * channels;
                for a in 0..k {
                    for b in 0..k {
                        data[base + a * k + b] = (rows[a][i] * cols[b][j]) as f32;
                    }
                }
            }
        }
        Ok(SpatialBasis {
            height,
            width,
            num_even,
            num_odd,
            data: Tensor::new(vec![height, width, channels], data)?,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_even(&self) -> usize {
        self.num_even
    }

    pub fn num_odd(&self) -> usize {
        self.num_odd
    }

    pub fn channels(&self) -> usize {
        (self.num_even + self.num_odd).pow(2)
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn tensor<T: Float>(&self) -> Tensor<T> {
        self.data.cast()
    }
}

/// One head's query, logits, normalised map and answer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHeadResult<T: Float = f32> {
    pub query: Tensor<T>,
    pub logits: Tensor<T>,
    pub map: Tensor<T>,
    pub answer: Tensor<T>,
}

/// Content vs position decomposition of one query's logits.
#[derive(Clone, Debug, PartialEq)]
pub struct WhatWhereMap {
    pub what: Tensor<f32>,
    pub r#where: Tensor<f32>,
    /// `what - where`, clamped to `±ln 10`.
    pub d: Tensor<f32>,
    /// `d ⊙ A`.
    pub c: Tensor<f32>,
}

fn hwc(op: &'static str, t: &Tensor<impl Float>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::shape(op, format!("expected h×w×c, got {s:?}"))),
    }
}

/// Split `o_vis` along channels into keys (first `c_k`) and values (next `c_v`).
pub fn split_keys_values<T: Float>(o_vis: &Tensor<T>, c_k: usize, c_v: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c) = hwc("split_keys_values", o_vis)?;
    if c_k == 0 {
        return Err(Error::invalid("keys must have at least one channel"));
    }
    if c_k + c_v != c {
        return Err(Error::shape(
            "split_keys_values",
            format!("{c_k} + {c_v} channels requested from {c}"),
        ));
    }
    let mut keys = Vec::with_capacity(h * w * c_k);
    let mut values = Vec::with_capacity(h * w * c_v);
    for cell in o_vis.data().chunks(c) {
        keys.extend_from_slice(&cell[..c_k]);
        values.extend_from_slice(&cell[c_k..]);
    }
    Ok((
        Tensor::new(vec![h, w, c_k], keys)?,
        Tensor::new(vec![h, w, c_v], values)?,
    ))
}

/// Append the basis planes after the channels of `t`.
pub fn concat_spatial<T: Float>(t: &Tensor<T>, basis: &SpatialBasis) -> Result<Tensor<T>> {
    let (h, w, c) = hwc("concat_spatial", t)?;
    if h != basis.height || w != basis.width {
        return Err(Error::shape(
            "concat_spatial",
            format!("tensor {h}x{w} vs basis {}x{}", basis.height, basis.width),
        ));
    }
    let cs = basis.channels();
    let mut data = Vec::with_capacity(h * w * (c + cs));
    for (cell, planes) in t.data().chunks(c.max(1)).zip(basis.data.data().chunks(cs)) {
        if c > 0 {
            data.extend_from_slice(cell);
        }
        data.extend(planes.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(vec![h, w, c + cs], data)
}

/// `Ã[i,j] = Σ_l q[l] K̃[i,j,l]`.
pub fn attention_logits<T: Float>(query: &Tensor<T>, keys: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = hwc("attention_logits", keys)?;
    if query.len() != c {
        return Err(Error::shape(
            "attention_logits",
            format!("query length {} vs key channels {c}", query.len()),
        ));
    }
    let q = query.data();
    let data = keys
        .data()
        .chunks(c)
        .map(|cell| cell.iter().zip(q).map(|(&k, &qv)| k * qv).sum())
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Max-subtracted softmax over every cell of a logits map.
pub fn spatial_softmax<T: Float>(logits: &Tensor<T>) -> Tensor<T> {
    Tensor::new(logits.shape().to_vec(), softmax(logits.data())).expect("same length")
}

/// `a[c] = Σ_{i,j} A[i,j] Ṽ[i,j,c]`.
pub fn attend<T: Float>(map: &Tensor<T>, values: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = hwc("attend", values)?;
    if map.shape() != [h, w] {
        return Err(Error::shape(
            "attend",
            format!("map {:?} vs values {:?}", map.shape(), values.shape()),
        ));
    }
    let mut out = vec![T::zero(); c];
    for (&weight, cell) in map.data().iter().zip(values.data().chunks(c)) {
        for (o, &v) in out.iter_mut().zip(cell) {
            *o += weight * v;
        }
    }
    Tensor::new(vec![c], out)
}

/// Run each query through logits → softmax → answer independently.
pub fn multi_head_attend<T: Float>(
    queries: &[Tensor<T>],
    keys: &Tensor<T>,
    values: &Tensor<T>,
) -> Result<Vec<AttentionHeadResult<T>>> {
    if queries.is_empty() {
        return Err(Error::invalid("need at least one attention head"));
    }
    queries
        .iter()
        .map(|q| {
            let logits = attention_logits(q, keys)?;
            let map = spatial_softmax(&logits);
            let answer = attend(&map, values)?;
            Ok(AttentionHeadResult {
                query: q.clone(),
                logits,
                map,
                answer,
            })
        })
        .collect()
}

/// Keep entries `>= t * max(A)` and renormalise them to sum to one.
pub fn hard_threshold<T: Float>(map: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(map.clone());
    let y = g.hard_threshold(x, T::of(t))?;
    Ok(g.value(y).clone())
}

/// Per-location L2 norm over channels, used in place of query-key logits by
/// the norm-of-keys ablation.
pub fn l2_norm_logits<T: Float>(keys: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = hwc("l2_norm_logits", keys)?;
    let data = keys
        .data()
        .chunks(c.max(1))
        .map(|cell| cell.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Split a query's logits into its content (`what`) and position (`where`)
/// parts and weight their clamped difference by the attention map.
pub fn what_where_map(
    query: &Tensor<f32>,
    keys: &Tensor<f32>,
    basis: &SpatialBasis,
    map: &Tensor<f32>,
) -> Result<WhatWhereMap> {
    let (h, w, c_k) = hwc("what_where_map", keys)?;
    let cs = basis.channels();
    if query.len() != c_k + cs {
        return Err(Error::shape(
            "what_where_map",
            format!("query length {} vs {c_k} + {cs}", query.len()),
        ));
    }
    if h != basis.height || w != basis.width || map.shape() != [h, w] {
        return Err(Error::shape(
            "what_where_map",
            format!(
                "keys {h}x{w}, basis {}x{}, map {:?}",
                basis.height,
                basis.width,
                map.shape()
            ),
        ));
    }
    let q = query.data();
    let what: Vec<f32> = keys
        .data()
        .chunks(c_k)
        .map(|cell| cell.iter().zip(&q[..c_k]).map(|(a, b)| a * b).sum())
        .collect();
    let wher: Vec<f32> = basis
        .data
        .data()
        .chunks(cs)
        .map(|cell| cell.iter().zip(&q[c_k..]).map(|(a, b)| a * b).sum())
        .collect();
    let clamp = WHAT_WHERE_CLAMP as f32;
    let d: Vec<f32> = what
        .iter()
        .zip(&wher)
        .map(|(a, b)| (a - b).clamp(-clamp, clamp))
        .collect();
    let c: Vec<f32> = d.iter().zip(map.data()).map(|(x, a)| x * a).collect();
    Ok(WhatWhereMap {
        what: Tensor::new(vec![h, w], what)?,
        r#where: Tensor::new(vec![h, w], wher)?,
        d: Tensor::new(vec![h, w], d)?,
        c: Tensor::new(vec![h, w], c)?,
    })
}

/// Row sums (length h) and column sums (length w) of an h×w map.
pub fn marginal_distributions<T: Float>(map: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let &[h, w] = map.shape() else {
        return Err(Error::shape(
            "marginal_distributions",
            format!("expected h×w, got {:?}", map.shape()),
        ));
    };
    let mut rows = vec![T::zero(); h];
    let mut cols = vec![T::zero(); w];
    for i in 0..h {
        for j in 0..w {
            let v = map.data()[i * w + j];
            rows[i] += v;
            cols[j] += v;
        }
    }
    Ok((rows, cols))
}

/// Graph nodes for one attention head.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub query: Option<NodeId>,
    pub logits: NodeId,
    pub map: NodeId,
    pub answer: NodeId,
}

/// How a head turns keys into logits on the graph.
#[derive(Clone, Copy, Debug)]
pub enum LogitSource {
    /// Inner product with a query node of length `c_K + c_S`.
    Query(NodeId),
    /// Precomputed logits node (`h × w`), e.g. per-location key norms.
    Logits(NodeId),
}

/// Record one attention head on `g`. `keys` is K̃ (`h×w×(c_K+c_S)`) and
/// `values` is Ṽ; `threshold` applies [`hard_threshold`] to the map before
/// the spatial sum.
pub fn head_on_graph<T: Float>(
    g: &mut Graph<T>,
    source: LogitSource,
    keys: NodeId,
    values: NodeId,
    threshold: Option<f64>,
) -> Result<HeadNodes> {
    let (h, w, ck) = match g.shape(keys) {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::shape("attention_logits", format!("keys {s:?}"))),
    };
    let (query, logits) = match source {
        LogitSource::Query(q) => {
            if g.value(q).len() != ck {
                return Err(Error::shape(
                    "attention_logits",
                    format!("query {:?} vs key channels {ck}", g.shape(q)),
                ));
            }
            let col = g.reshape(q, &[ck, 1])?;
            let l = g.matmul(keys, col)?;
            (Some(q), g.reshape(l, &[h, w])?)
        }
        LogitSource::Logits(l) => (None, l),
    };
    let mut map = g.softmax(logits);
    if let Some(t) = threshold {
        map = g.hard_threshold(map, T::of(t))?;
    }
    let cv = g.value(values).last_dim();
    if g.shape(values)[..2] != [h, w] {
        return Err(Error::shape(
            "attend",
            format!("map {h}x{w} vs values {:?}", g.shape(values)),
        ));
    }
    let row = g.reshape(map, &[1, h * w])?;
    let flat = g.reshape(values, &[h * w, cv])?;
    let a = g.matmul(row, flat)?;
    let answer = g.reshape(a, &[cv])?;
    Ok(HeadNodes {
        query,
        logits,
        map,
        answer,
    })
}
