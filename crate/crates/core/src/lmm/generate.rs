//! Greedy decoding with a key/value cache and a full attention trace.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{DecoderLM, InputSequence};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// Attention of one generated token over all of its predecessors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Zero-based index of the generated token; entry `k` sees `prompt_len + k` positions.
    pub token_index: usize,
    /// `[layer][head][key]`, each row a softmax over the predecessors.
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl TraceEntry {
    pub fn predecessors(&self) -> usize {
        self.layers.first().and_then(|l| l.first()).map_or(0, |r| r.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub visual: Range<usize>,
    pub entries: Vec<TraceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub trace: AttentionTrace,
}

#[derive(Serialize)]
struct Dump<'a> {
    tokens: &'a [usize],
    trace: &'a [TraceEntry],
}

impl Generation {
    /// `{tokens, trace: [{token_index, layers}]}`.
    pub fn dump_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Dump {
            tokens: &self.tokens,
            trace: &self.trace.entries,
        })?)
    }
}

struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl DecoderLM {
    fn text_row(&self, store: &ParamStore, token: usize, position: usize) -> Result<Vec<f64>> {
        let d = self.config.d_model;
        if token >= self.config.vocab {
            return Err(Error::Argument(format!("token {token} outside the vocabulary")));
        }
        if position >= self.config.max_len {
            return Err(Error::Argument(format!("position {position} exceeds max_len {}", self.config.max_len)));
        }
        let t = &store.tensor(self.tok).data()[token * d..(token + 1) * d];
        let p = &store.tensor(self.pos).data()[position * d..(position + 1) * d];
        Ok(t.iter().zip(p).map(|(a, b)| a + b).collect())
    }

    /// Embedded prompt rows `[len, d]` in sequence order.
    fn embed_prompt(&self, store: &ParamStore, input: &InputSequence) -> Result<Vec<f64>> {
        let d = self.config.d_model;
        if input.visual.cols() != d {
            return Err(Error::Dimension {
                op: "embed_prompt",
                left: vec![d],
                right: input.visual.shape().to_vec(),
            });
        }
        let mut x = Vec::with_capacity(input.len() * d);
        for (i, &t) in input.pre_text.iter().enumerate() {
            x.extend(self.text_row(store, t, i)?);
        }
        x.extend_from_slice(input.visual.data());
        let base = input.pre_text.len() + input.visual.rows();
        for (i, &t) in input.post_text.iter().enumerate() {
            x.extend(self.text_row(store, t, base + i)?);
        }
        Ok(x)
    }

    /// Appends `n` rows to the cache; returns last-row logits and its attention `[layer][head][key]`.
    fn extend(&self, store: &ParamStore, cache: &mut KvCache, mut x: Vec<f64>, n: usize) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
        let d = self.config.d_model;
        let heads = self.config.n_head;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let start = cache.len;
        let total = start + n;
        let mut trace = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.ln1.apply(store, &x, d);
            let qkv = layer.qkv.apply(store, &h, n);
            for r in 0..n {
                let row = &qkv[r * 3 * d..(r + 1) * 3 * d];
                cache.keys[l].extend_from_slice(&row[d..2 * d]);
                cache.values[l].extend_from_slice(&row[2 * d..]);
            }
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            let mut attn = vec![0.0; n * d];
            let mut last_rows = Vec::with_capacity(heads);
            let mut p = vec![0.0; total];
            for hd in 0..heads {
                for i in 0..n {
                    let q = &qkv[i * 3 * d + hd * dh..i * 3 * d + (hd + 1) * dh];
                    let visible = start + i + 1;
                    for (j, pj) in p[..visible].iter_mut().enumerate() {
                        let k = &keys[j * d + hd * dh..j * d + (hd + 1) * dh];
                        *pj = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let max = p[..visible].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for pj in &mut p[..visible] {
                        *pj = (*pj - max).exp();
                        sum += *pj;
                    }
                    p[..visible].iter_mut().for_each(|pj| *pj /= sum);
                    let out = &mut attn[i * d + hd * dh..i * d + (hd + 1) * dh];
                    for (j, &pj) in p[..visible].iter().enumerate() {
                        let v = &values[j * d + hd * dh..j * d + (hd + 1) * dh];
                        out.iter_mut().zip(v).for_each(|(o, vv)| *o += pj * vv);
                    }
                    if i + 1 == n {
                        last_rows.push(p[..visible].to_vec());
                    }
                }
            }
            trace.push(last_rows);
            let o = layer.proj.apply(store, &attn, n);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h = layer.ln2.apply(store, &x, d);
            let m = layer.mlp.apply(store, &h, n);
            x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
        }
        cache.len = total;
        let last = self.ln_f.apply(store, &x[(n - 1) * d..], d);
        (self.head.apply(store, &last, 1), trace)
    }

    /// Greedy decoding until `<eos>` (kept as the final token) or `max_tokens`.
    pub fn generate(&self, store: &ParamStore, input: &InputSequence, eos: usize, max_tokens: usize) -> Result<Generation> {
        if max_tokens < 1 {
            return Err(Error::Argument("max_tokens must be at least 1".into()));
        }
        if input.is_empty() {
            return Err(Error::Argument("empty prompt".into()));
        }
        let n = input.len();
        let mut cache = KvCache {
            keys: vec![Vec::new(); self.layers.len()],
            values: vec![Vec::new(); self.layers.len()],
            len: 0,
        };
        let x = self.embed_prompt(store, input)?;
        let (mut logits, mut rows) = self.extend(store, &mut cache, x, n);
        let mut tokens = Vec::new();
        let mut entries = Vec::new();
        loop {
            let tok = argmax(&logits);
            entries.push(TraceEntry {
                token_index: tokens.len(),
                layers: rows,
            });
            tokens.push(tok);
            if tok == eos || tokens.len() == max_tokens {
                break;
            }
            let pos = n + tokens.len() - 1;
            if pos >= self.config.max_len {
                break;
            }
            let x = self.text_row(store, tok, pos)?;
            (logits, rows) = self.extend(store, &mut cache, x, 1);
        }
        Ok(Generation {
            tokens,
            trace: AttentionTrace {
                visual: input.visual_range(),
                entries,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first_of_ties() {
        assert_eq!(argmax(&[0.5, 2.0, 2.0, -1.0]), 1);
        assert_eq!(argmax(&[3.0]), 0);
    }
}
