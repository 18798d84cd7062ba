use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, Float, ParamId, ParamStore, Tape, Tensor, Var};

/// Frequency-clustered embeddings shared by the adaptive input and the
/// adaptive softmax.
///
/// Cluster `k` covers ids `bounds[k]..bounds[k+1]` and stores vectors of
/// dimension `d / 4^k`; clusters after the first carry a projection `P_k`
/// (`d × d_k`) mapping them to and from the model dimension. The head
/// softmax scores the first cluster's words and one gate per tail cluster.
#[derive(Debug, Clone)]
pub struct AdaptiveSoftmax {
    pub bounds: Vec<usize>,
    pub dims: Vec<usize>,
    pub tables: Vec<ParamId>,
    pub projections: Vec<Option<ParamId>>,
    pub gate: Option<ParamId>,
}

impl AdaptiveSoftmax {
    pub fn clusters(&self) -> usize {
        self.tables.len()
    }

    pub fn vocab_size(&self) -> usize {
        *self.bounds.last().unwrap_or(&0)
    }

    pub fn cluster_of(&self, word: usize) -> usize {
        self.bounds[1..].partition_point(|&b| b <= word)
    }

    /// Token ids grouped by cluster, as (positions, local ids).
    fn group(&self, tokens: &[usize]) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut groups = vec![(Vec::new(), Vec::new()); self.clusters()];
        for (i, &w) in tokens.iter().enumerate() {
            let k = self.cluster_of(w);
            groups[k].0.push(i);
            groups[k].1.push(w - self.bounds[k]);
        }
        groups
    }

    /// Adaptive input: `[n × d]` embeddings of `tokens`.
    pub fn embed<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: &[usize],
    ) -> Result<Var> {
        let mut parts = Vec::new();
        for (k, (pos, local)) in self.group(tokens).into_iter().enumerate() {
            if pos.is_empty() {
                continue;
            }
            let table = tape.param(store, self.tables[k]);
            let mut rows = tape.gather_rows(table, &local)?;
            if let Some(p) = self.projections[k] {
                let p = tape.param(store, p);
                rows = tape.matmul_nt(rows, p)?;
            }
            parts.push((rows, pos));
        }
        tape.scatter_rows(tokens.len(), parts)
    }

    fn head_weight<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let t0 = tape.param(store, self.tables[0]);
        match self.gate {
            Some(g) => {
                let g = tape.param(store, g);
                tape.concat_rows(t0, g)
            }
            None => Ok(t0),
        }
    }

    /// Mean negative log-likelihood of `targets` given hidden rows `h`.
    pub fn nll<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        targets: &[usize],
    ) -> Result<Var> {
        let n = targets.len();
        if n == 0 || tape.shape(h)[0] != n {
            return Err(Error::dim("adaptive softmax", tape.shape(h), &[n]));
        }
        let scale = T::one() / T::of(n as f64);
        let c0 = self.bounds[1];
        let head_targets: Vec<usize> = targets
            .iter()
            .map(|&w| match self.cluster_of(w) {
                0 => w,
                k => c0 + k - 1,
            })
            .collect();
        let head = self.head_weight(tape, store)?;
        let logits = tape.matmul_nt(h, head)?;
        let lp = tape.log_softmax_rows(logits)?;
        let mut total = tape.pick_sum(lp, &head_targets, scale)?;
        for (k, (pos, local)) in self.group(targets).into_iter().enumerate().skip(1) {
            if pos.is_empty() {
                continue;
            }
            let rows = tape.gather_rows(h, &pos)?;
            let p = tape.param(
                store,
                self.projections[k].expect("tail clusters carry a projection"),
            );
            let proj = tape.matmul(rows, p)?;
            let table = tape.param(store, self.tables[k]);
            let logits = tape.matmul_nt(proj, table)?;
            let lp = tape.log_softmax_rows(logits)?;
            let term = tape.pick_sum(lp, &local, scale)?;
            total = tape.add(total, term)?;
        }
        Ok(total)
    }

    /// Log-probabilities of every word, `[n × V]`, for hidden rows `h`.
    pub fn full_log_probs<T: Float>(
        &self,
        store: &ParamStore<T>,
        h: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let n = h.dims2("adaptive softmax")?.0;
        let v = self.vocab_size();
        let c0 = self.bounds[1];
        let mut head_w = store.value(self.tables[0]).clone();
        if let Some(g) = self.gate {
            let mut data = head_w.into_data();
            data.extend_from_slice(store.value(g).data());
            let d = h.last_dim();
            head_w = Tensor::new(&[data.len() / d, d], data)?;
        }
        let mut head = matmul_nt(h, &head_w)?;
        log_softmax_rows(&mut head);
        let mut out = Tensor::zeros(&[n, v]);
        for r in 0..n {
            out.row_mut(r)[..c0].copy_from_slice(&head.row(r)[..c0]);
        }
        for k in 1..self.clusters() {
            let p = store.value(self.projections[k].expect("tail clusters carry a projection"));
            let proj = matmul(h, p)?;
            let mut tail = matmul_nt(&proj, store.value(self.tables[k]))?;
            log_softmax_rows(&mut tail);
            let (lo, hi) = (self.bounds[k], self.bounds[k + 1]);
            for r in 0..n {
                let gate = head.row(r)[c0 + k - 1];
                let dst = &mut out.row_mut(r)[lo..hi];
                for (o, &t) in dst.iter_mut().zip(tail.row(r)) {
                    *o = gate + t;
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn log_softmax_rows<T: Float>(x: &mut Tensor<T>) {
    let c = x.last_dim();
    for row in x.data_mut().chunks_mut(c.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
}
