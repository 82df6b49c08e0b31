//! Scaled dot-product attention: the grouped kernel used by the model and
//! the plain array-level layer functions.

use std::sync::Arc;

use ndarray::s;

use crate::error::{dim_err, MivaError, Result};
use crate::tensor::{ensure_finite, softmax_rows_inplace, Mat};

/// How query rows are split into independent attention problems.
///
/// Query group `g` covers rows `g*q_len..(g+1)*q_len` and attends to key
/// group `key_group[g]`, i.e. key/value rows
/// `key_group[g]*k_len..(key_group[g]+1)*k_len`. An optional additive bias
/// of shape `q_len x k_len` is applied per query group.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub q_len: usize,
    pub k_len: usize,
    pub key_group: Arc<Vec<usize>>,
    pub bias: Option<Arc<Vec<Arc<Mat>>>>,
    pub scale: f64,
}

impl AttnLayout {
    /// One group of every row against every key.
    pub fn dense(q_len: usize, k_len: usize, d_k: usize) -> Self {
        Self {
            q_len,
            k_len,
            key_group: Arc::new(vec![0]),
            bias: None,
            scale: 1.0 / (d_k as f64).sqrt(),
        }
    }

    pub fn groups(&self) -> usize {
        self.key_group.len()
    }

    pub fn with_bias(mut self, bias: Option<Arc<Vec<Arc<Mat>>>>) -> Self {
        self.bias = bias;
        self
    }
}

pub(crate) fn attention_forward(q: &Mat, k: &Mat, v: &Mat, layout: &AttnLayout) -> (Mat, Vec<Mat>) {
    let (ql, kl) = (layout.q_len, layout.k_len);
    let mut out = Mat::zeros((q.nrows(), v.ncols()));
    let mut probs = Vec::with_capacity(layout.groups());
    for (g, &kg) in layout.key_group.iter().enumerate() {
        let qg = q.slice(s![g * ql..(g + 1) * ql, ..]);
        let kgv = k.slice(s![kg * kl..(kg + 1) * kl, ..]);
        let vg = v.slice(s![kg * kl..(kg + 1) * kl, ..]);
        let mut scores = qg.dot(&kgv.t());
        scores *= layout.scale;
        if let Some(bias) = &layout.bias {
            scores += bias[g].as_ref();
        }
        softmax_rows_inplace(&mut scores);
        out.slice_mut(s![g * ql..(g + 1) * ql, ..]).assign(&scores.dot(&vg));
        probs.push(scores);
    }
    (out, probs)
}

pub(crate) fn attention_backward(
    g_out: &Mat,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    layout: &AttnLayout,
    probs: &[Mat],
    needs: [bool; 3],
) -> (Option<Mat>, Option<Mat>, Option<Mat>) {
    let (ql, kl) = (layout.q_len, layout.k_len);
    let mut gq = needs[0].then(|| Mat::zeros(q.dim()));
    let mut gk = needs[1].then(|| Mat::zeros(k.dim()));
    let mut gv = needs[2].then(|| Mat::zeros(v.dim()));
    for (g, &kg) in layout.key_group.iter().enumerate() {
        let p = &probs[g];
        let go = g_out.slice(s![g * ql..(g + 1) * ql, ..]);
        let kr = kg * kl..(kg + 1) * kl;
        if let Some(gv) = gv.as_mut() {
            let mut dst = gv.slice_mut(s![kr.clone(), ..]);
            dst += &p.t().dot(&go);
        }
        if gq.is_none() && gk.is_none() {
            continue;
        }
        let vg = v.slice(s![kr.clone(), ..]);
        let mut ds = go.dot(&vg.t());
        for (mut row, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot: f64 = row.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
            row.zip_mut_with(&pr, |d, &pv| *d = pv * (*d - dot) * layout.scale);
        }
        if let Some(gq) = gq.as_mut() {
            let kgv = k.slice(s![kr.clone(), ..]);
            gq.slice_mut(s![g * ql..(g + 1) * ql, ..]).assign(&ds.dot(&kgv));
        }
        if let Some(gk) = gk.as_mut() {
            let qg = q.slice(s![g * ql..(g + 1) * ql, ..]);
            let mut dst = gk.slice_mut(s![kr, ..]);
            dst += &ds.t().dot(&qg);
        }
    }
    (gq, gk, gv)
}

/// `softmax(Q K^T / sqrt(d_K) + mask) V`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, mask: Option<&Mat>) -> Result<Mat> {
    if q.ncols() != k.ncols() {
        return Err(dim_err(
            "attention",
            format!("query dim {} != key dim {}", q.ncols(), k.ncols()),
        ));
    }
    if k.nrows() != v.nrows() {
        return Err(dim_err(
            "attention",
            format!("{} keys but {} values", k.nrows(), v.nrows()),
        ));
    }
    ensure_finite(q, "attention query")?;
    ensure_finite(k, "attention key")?;
    ensure_finite(v, "attention value")?;
    let mut layout = AttnLayout::dense(q.nrows(), k.nrows(), k.ncols());
    if let Some(m) = mask {
        if m.dim() != (q.nrows(), k.nrows()) {
            return Err(dim_err(
                "attention mask",
                format!("expected {:?}, got {:?}", (q.nrows(), k.nrows()), m.dim()),
            ));
        }
        if m.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(MivaError::NonFinite("attention mask"));
        }
        layout.bias = Some(Arc::new(vec![Arc::new(m.clone())]));
    }
    Ok(attention_forward(q, k, v, &layout).0)
}

/// Projection matrices of one attention layer.
///
/// `w_q: d_in x d_k`, `w_k: d_ctx x d_k`, `w_v: d_ctx x d_v`,
/// `w_o: d_v x d_out`. For self-attention `d_ctx == d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
}

impl AttentionParams {
    pub fn new(w_q: Mat, w_k: Mat, w_v: Mat, w_o: Mat) -> Result<Self> {
        let p = Self { w_q, w_k, w_v, w_o };
        p.validate()?;
        Ok(p)
    }

    pub fn d_k(&self) -> usize {
        self.w_k.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_q.ncols() != self.w_k.ncols() {
            return Err(dim_err("AttentionParams", "W_Q and W_K column counts differ"));
        }
        if self.w_k.nrows() != self.w_v.nrows() {
            return Err(dim_err("AttentionParams", "W_K and W_V row counts differ"));
        }
        if self.w_v.ncols() != self.w_o.nrows() {
            return Err(dim_err("AttentionParams", "W_V columns != W_O rows"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.w_q.len() + self.w_k.len() + self.w_v.len() + self.w_o.len()
    }
}

/// `Att(f W_Q, f W_K, f W_V) W_O`.
pub fn self_attention(f: &Mat, params: &AttentionParams) -> Result<Mat> {
    cross_attention(f, f, params)
}

/// `Att(f W_Q, c W_K, c W_V) W_O`.
pub fn cross_attention(f: &Mat, c: &Mat, params: &AttentionParams) -> Result<Mat> {
    params.validate()?;
    if f.ncols() != params.w_q.nrows() {
        return Err(dim_err(
            "attention input",
            format!("token dim {} != W_Q rows {}", f.ncols(), params.w_q.nrows()),
        ));
    }
    if c.ncols() != params.w_k.nrows() {
        return Err(dim_err(
            "attention context",
            format!("context dim {} != W_K rows {}", c.ncols(), params.w_k.nrows()),
        ));
    }
    let q = f.dot(&params.w_q);
    let k = c.dot(&params.w_k);
    let v = c.dot(&params.w_v);
    Ok(attention(&q, &k, &v, None)?.dot(&params.w_o))
}
