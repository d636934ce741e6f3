//! Feature-hashed log embeddings and soft template clustering.

use crate::error::{Error, Result};
use crate::tensor::{mix_seed, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

pub const TEMPLATE_TEMPERATURE: f64 = 0.07;
pub const N_TEMPLATES: usize = 16;

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325 ^ mix_seed(seed);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix_seed(h)
}

/// Mean of signed one-hot token vectors, L2-normalized. Each token lands in
/// one of `2 * dim` buckets: the bucket index modulo `dim` picks the
/// coordinate and the upper half flips the sign.
pub fn log_embed(tokens: &[String], dim: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dim == 0 {
        return v;
    }
    for tok in tokens {
        let bucket = (fnv1a(tok.as_bytes(), seed) % (2 * dim as u64)) as usize;
        let sign = if bucket < dim { 1.0 } else { -1.0 };
        v[bucket % dim] += sign / tokens.len() as f64;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Unit-norm prototype rows `[J, dim]`.
#[derive(Clone, Debug)]
pub struct TemplatePrototypes {
    pub id: ParamId,
    pub count: usize,
    pub dim: usize,
}

/// Soft assignment of one log vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateAssignment {
    pub probs: Vec<f64>,
    /// `−log p(j*)` for the most likely prototype `j*`.
    pub loss: f64,
}

impl TemplatePrototypes {
    /// Registers random unit prototypes; [`Self::init_farthest`] replaces them
    /// once data is available.
    pub fn new(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut SeededRng) -> Self {
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            rows.push(unit((0..dim).map(|_| rng.normal()).collect()));
        }
        let id = store.add(name, rows_tensor(&rows, dim), true);
        Self { id, count, dim }
    }

    /// Greedy farthest-point selection: start from the first vector, then
    /// repeatedly take the vector least similar to all chosen ones. Rows left
    /// over when `vectors` runs out keep their current values.
    pub fn init_farthest(&self, store: &mut ParamStore, vectors: &[Vec<f64>]) {
        let mut chosen: Vec<usize> = Vec::new();
        let mut best_sim = vec![f64::NEG_INFINITY; vectors.len()];
        while chosen.len() < self.count.min(vectors.len()) {
            let next = if chosen.is_empty() {
                0
            } else {
                let (i, s) = best_sim
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !chosen.contains(i))
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .expect("unchosen vector remains");
                if *s >= 1.0 - 1e-12 {
                    break;
                }
                i
            };
            chosen.push(next);
            for (j, v) in vectors.iter().enumerate() {
                best_sim[j] = best_sim[j].max(cosine(v, &vectors[next]));
            }
        }
        let p = store.value_mut(self.id);
        for (row, &i) in chosen.iter().enumerate() {
            let u = unit(vectors[i].clone());
            p.data_mut()[row * self.dim..(row + 1) * self.dim].copy_from_slice(&u);
        }
    }

    /// Rescales every row to unit length.
    pub fn renormalize(&self, store: &mut ParamStore) {
        let dim = self.dim;
        for row in store.value_mut(self.id).data_mut().chunks_mut(dim) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
    }

    pub fn assign(&self, store: &ParamStore, h: &[f64]) -> Result<TemplateAssignment> {
        template_assign(h, store.value(self.id))
    }

    /// Differentiable assignment for a batch `h: [N, dim]`; returns the
    /// `[N, J]` probabilities and the mean self-labeled loss.
    pub fn assign_taped<'t>(&self, tape: &'t Tape, protos: Var<'t>, h: &Tensor) -> Result<(Var<'t>, Var<'t>)> {
        let norms = protos.square().sum_axis(1)?.sqrt()?;
        let unit_t = protos.transpose()?.div(norms)?;
        let mut hn = h.clone();
        for row in hn.data_mut().chunks_mut(self.dim) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        let probs = tape.constant(hn).matmul(unit_t)?.scale(1.0 / TEMPLATE_TEMPERATURE).softmax()?;
        let n = h.shape()[0];
        if n == 0 {
            return Ok((probs, tape.scalar(0.0)));
        }
        let pv = probs.value();
        let mut pick = Tensor::zeros(&[n, self.count]);
        for r in 0..n {
            let row = pv.row(r);
            let j = (0..self.count).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            pick.data_mut()[r * self.count + j] = 1.0;
        }
        let picked = probs.mul(tape.constant(pick))?.sum_axis(1)?;
        let loss = picked.maximum(tape.constant(Tensor::full(&[n], 1e-300)))?.log()?.mean().neg();
        Ok((probs, loss))
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn rows_tensor(rows: &[Vec<f64>], dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows.len(), dim]);
    for (r, row) in rows.iter().enumerate() {
        t.data_mut()[r * dim..(r + 1) * dim].copy_from_slice(row);
    }
    t
}

/// `softmax_j(cos(h, p_j) / 0.07)` with the loss `−log p(j*)` at the argmax.
pub fn template_assign(h: &[f64], prototypes: &Tensor) -> Result<TemplateAssignment> {
    let j = prototypes.rows();
    if j == 0 {
        return Err(Error::Invalid("template assignment needs at least one prototype".into()));
    }
    let logits: Vec<f64> = (0..j).map(|r| cosine(h, prototypes.row(r)) / TEMPLATE_TEMPERATURE).collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
    // the argmax logit equals the max, so −log p(j*) = ln z
    Ok(TemplateAssignment { probs, loss: z.ln() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn embedding_is_deterministic_and_unit() {
        let a = log_embed(&toks("cache refresh completed"), 64, 3);
        assert_eq!(a, log_embed(&toks("cache refresh completed"), 64, 3));
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-10);
    }

    #[test]
    fn disjoint_tokens_are_nearly_orthogonal() {
        let mut rng = SeededRng::new(11);
        let mut total = 0.0;
        for i in 0..100 {
            let a: Vec<String> = (0..5).map(|k| format!("a{}_{}", i, k + rng.below(1000))).collect();
            let b: Vec<String> = (0..5).map(|k| format!("b{}_{}", i, k + rng.below(1000))).collect();
            let s = cosine(&log_embed(&a, 64, i as u64), &log_embed(&b, 64, i as u64)).abs();
            assert!(s < 0.9);
            total += s;
        }
        assert!(total / 100.0 < 0.15, "{}", total / 100.0);
    }

    #[test]
    fn single_prototype_gets_everything() {
        let p = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let a = template_assign(&[0.3, 0.7], &p).unwrap();
        assert_eq!(a.probs, vec![1.0]);
        assert_eq!(a.loss, 0.0);
    }

    #[test]
    fn equidistant_prototypes_split_evenly() {
        let p = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = template_assign(&[1.0, 1.0], &p).unwrap();
        assert!((a.probs[0] - 0.5).abs() < 1e-15 && (a.probs[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sharp_temperature_value() {
        let p = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = template_assign(&[1.0, 0.0], &p).unwrap();
        let want = 1.0 / (1.0 + (-1.0f64 / 0.07).exp());
        assert!((a.probs[0] - want).abs() < 1e-15);
        assert!((a.probs[0] - 0.999_999_38).abs() < 1e-8);
        assert!((a.loss + want.ln()).abs() < 1e-15);
    }

    #[test]
    fn taped_matches_plain() {
        let mut rng = SeededRng::new(4);
        let mut store = ParamStore::new();
        let protos = TemplatePrototypes::new(&mut store, "p", 4, 6, &mut rng);
        let h = rng.sample(crate::tensor::Dist::Normal, &[3, 6]);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (probs, loss) = protos.assign_taped(&tape, bound.get(protos.id), &h).unwrap();
        let mut want_loss = 0.0;
        for r in 0..3 {
            let a = protos.assign(&store, h.row(r)).unwrap();
            for j in 0..4 {
                assert!((probs.value().at(r, j) - a.probs[j]).abs() < 1e-12);
            }
            want_loss += a.loss / 3.0;
        }
        assert!((loss.item() - want_loss).abs() < 1e-12);
    }

    #[test]
    fn farthest_point_init_picks_spread() {
        let mut rng = SeededRng::new(5);
        let mut store = ParamStore::new();
        let protos = TemplatePrototypes::new(&mut store, "p", 2, 2, &mut rng);
        let vs = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![-1.0, 0.05]];
        protos.init_farthest(&mut store, &vs);
        let p = store.value(protos.id);
        assert_eq!(p.row(0), &[1.0, 0.0]);
        assert!(p.row(1)[0] < -0.99);
    }

    proptest! {
        #[test]
        fn assignment_sums_to_one_and_permutes(h in prop::collection::vec(-2.0f64..2.0, 3), seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let p = rng.sample(crate::tensor::Dist::Normal, &[4, 3]);
            let a = template_assign(&h, &p).unwrap();
            prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let rev = Tensor::from_rows(&(0..4).rev().map(|r| p.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
            let b = template_assign(&h, &rev).unwrap();
            for j in 0..4 {
                prop_assert!((a.probs[j] - b.probs[3 - j]).abs() < 1e-12);
            }
        }
    }
}
