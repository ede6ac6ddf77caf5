use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Anisotropic squared-L2 logits `d[i][j] = −s_j Σ_c e_ic (k_jc − q_ic)²`
/// for queries `q[HW×Ck]`, selection `e[HW×Ck]`, keys `k[THW×Ck]` and
/// shrinkage `s[THW]`. Every logit is `≤ 0`, with `0` at an exact match.
pub fn similarity<T: Element>(
    query: &Tensor<T>,
    selection: &Tensor<T>,
    keys: &Tensor<T>,
    shrinkage: &Tensor<T>,
) -> Result<Tensor<f64>> {
    let (hw, ck) = query.dims2()?;
    query.expect_same_shape(selection)?;
    let (thw, kck) = keys.dims2()?;
    if kck != ck || shrinkage.len() != thw {
        return Err(Error::dim(format!(
            "similarity of queries {:?} against keys {:?} with shrinkage {:?}",
            query.shape(),
            keys.shape(),
            shrinkage.shape()
        )));
    }
    let to64 = |t: &Tensor<T>| -> Vec<f64> { t.data().iter().map(|v| v.to_f64()).collect() };
    let (q, e, k, s) = (to64(query), to64(selection), to64(keys), to64(shrinkage));
    let mut out = vec![0.0f64; hw * thw];
    for i in 0..hw {
        let qi = &q[i * ck..(i + 1) * ck];
        let ei = &e[i * ck..(i + 1) * ck];
        let row = &mut out[i * thw..(i + 1) * thw];
        for (j, o) in row.iter_mut().enumerate() {
            let kj = &k[j * ck..(j + 1) * ck];
            let mut acc = 0.0;
            for c in 0..ck {
                let diff = kj[c] - qi[c];
                acc += ei[c] * diff * diff;
            }
            *o = -s[j] * acc;
        }
    }
    Tensor::new([hw, thw], out)
}

/// Sparse row-stochastic affinity: for every query row, the kept memory
/// columns in ascending order with their softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinity {
    rows: Vec<Vec<(usize, f64)>>,
    n_cols: usize,
}

impl Affinity {
    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn to_dense(&self) -> Tensor<f64> {
        let mut out = Tensor::zeros([self.rows.len(), self.n_cols]);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out.set(&[i, j], w);
            }
        }
        out
    }

    /// `A · v` for `v[THW×C]`.
    pub fn apply<T: Element>(&self, values: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c) = values.dims2()?;
        if n != self.n_cols {
            return Err(Error::dim(format!(
                "affinity over {} memory entries applied to {n} values",
                self.n_cols
            )));
        }
        let mut out = Tensor::zeros([self.rows.len(), c]);
        let mut acc = vec![0.0f64; c];
        for (i, row) in self.rows.iter().enumerate() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(j, w) in row {
                for (a, v) in acc.iter_mut().zip(values.row(j)) {
                    *a += w * v.to_f64();
                }
            }
            for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
                *o = T::from_f64(*a);
            }
        }
        Ok(out)
    }
}

/// Keeps the `top_k` largest logits of each row (ties go to the lower column)
/// and applies a softmax over them. `top_k` beyond the row length keeps all.
pub fn affinity(logits: &Tensor<f64>, top_k: usize) -> Result<Affinity> {
    let (r, c) = logits.dims2()?;
    if top_k == 0 {
        return Err(Error::Config("top_k must be positive".into()));
    }
    if c == 0 {
        return Err(Error::dim("affinity over an empty memory"));
    }
    let k = top_k.min(c);
    let mut order: Vec<usize> = Vec::with_capacity(c);
    let rows = (0..r)
        .map(|i| {
            let row = logits.row(i);
            order.clear();
            order.extend(0..c);
            if k < c {
                let by_rank = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
                order.select_nth_unstable_by(k - 1, by_rank);
                order.truncate(k);
                order.sort_unstable();
            }
            let max = order.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = order.iter().map(|&j| (row[j] - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            order.iter().zip(exps).map(|(&j, e)| (j, e / z)).collect()
        })
        .collect();
    Ok(Affinity { rows, n_cols: c })
}
