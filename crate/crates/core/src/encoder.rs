//! Criteria sentence encoder: token embeddings, two pre-norm transformer
//! layers with masked attention, masked max-pooling, a projection to the
//! memory width and two residual blocks.

use rand::Rng;

use crate::data::{CriteriaSentence, ModelConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::ontology::CodeBook;
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

const BRANCH_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformerLayer {
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub heads: Vec<AttentionHead>,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
    pub ffn_in: ParamId,
    pub ffn_in_bias: ParamId,
    pub ffn_out: ParamId,
    pub ffn_out_bias: ParamId,
}

/// `y = x + relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualBlock {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub layers: Vec<TransformerLayer>,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub blocks: [ResidualBlock; 2],
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (e, m) = (config.n_e, config.n_m);
        let hd = config.head_dim();
        let ffn = config.ffn_width();
        let layers = (0..2)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                TransformerLayer {
                    norm1_gain: store.add_filled(format!("{p}.norm1.gain"), e, 1.0),
                    norm1_bias: store.add_zeros(format!("{p}.norm1.bias"), &[e]),
                    heads: (0..config.attention_heads)
                        .map(|h| AttentionHead {
                            query: store.add_glorot(format!("{p}.head{h}.query"), e, hd, rng),
                            key: store.add_glorot(format!("{p}.head{h}.key"), e, hd, rng),
                            value: store.add_glorot(format!("{p}.head{h}.value"), e, hd, rng),
                        })
                        .collect(),
                    out_weight: store.add_glorot(format!("{p}.attn_out.weight"), e, e, rng),
                    out_bias: store.add_zeros(format!("{p}.attn_out.bias"), &[e]),
                    norm2_gain: store.add_filled(format!("{p}.norm2.gain"), e, 1.0),
                    norm2_bias: store.add_zeros(format!("{p}.norm2.bias"), &[e]),
                    ffn_in: store.add_glorot(format!("{p}.ffn_in.weight"), e, ffn, rng),
                    ffn_in_bias: store.add_zeros(format!("{p}.ffn_in.bias"), &[ffn]),
                    ffn_out: store.add_glorot(format!("{p}.ffn_out.weight"), ffn, e, rng),
                    ffn_out_bias: store.add_zeros(format!("{p}.ffn_out.bias"), &[e]),
                }
            })
            .collect();
        let proj_weight = store.add_glorot("encoder.proj.weight", e, m, rng);
        let proj_bias = store.add_zeros("encoder.proj.bias", &[m]);
        let mut block = |i: usize| ResidualBlock {
            w1: store.add_glorot(format!("encoder.res{i}.w1"), m, m, rng),
            b1: store.add_zeros(format!("encoder.res{i}.b1"), &[m]),
            w2: store.add_glorot(format!("encoder.res{i}.w2"), m, m, rng),
            b2: store.add_zeros(format!("encoder.res{i}.b2"), &[m]),
        };
        let blocks = [block(0), block(1)];
        let params = Self {
            layers,
            proj_weight,
            proj_bias,
            blocks,
        };
        // Residual branches start close to the identity.
        for id in params.branch_outputs() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= BRANCH_SCALE);
        }
        params
    }

    fn branch_outputs(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.layers.iter().flat_map(|l| [l.out_weight, l.ffn_out]).collect();
        ids.extend(self.blocks.iter().map(|b| b.w2));
        ids
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.extend([l.norm1_gain, l.norm1_bias]);
            for h in &l.heads {
                ids.extend([h.query, h.key, h.value]);
            }
            ids.extend([
                l.out_weight,
                l.out_bias,
                l.norm2_gain,
                l.norm2_bias,
                l.ffn_in,
                l.ffn_in_bias,
                l.ffn_out,
                l.ffn_out_bias,
            ]);
        }
        ids.extend([self.proj_weight, self.proj_bias]);
        for b in &self.blocks {
            ids.extend([b.w1, b.b1, b.w2, b.b2]);
        }
        ids
    }
}

/// Token matrix `[n_s, n_e]`: row i is the embedding of token i, masked rows
/// are zero.
pub fn embed_tokens(
    sentence: &CriteriaSentence,
    vocab: &Vocabulary,
    codebook: &CodeBook,
) -> Result<Tensor> {
    if sentence.tokens.len() != sentence.token_mask.len() {
        return Err(Error::InvalidArgument(format!(
            "criterion {}: {} tokens but {} mask entries",
            sentence.criterion_id,
            sentence.tokens.len(),
            sentence.token_mask.len()
        )));
    }
    if !sentence.token_mask.iter().any(|&m| m) {
        return Err(Error::DegenerateInput(format!(
            "criterion {} has no unmasked tokens",
            sentence.criterion_id
        )));
    }
    let dim = codebook.dim();
    let mut data = vec![0.0; sentence.tokens.len() * dim];
    for (i, (&id, &keep)) in sentence.tokens.iter().zip(&sentence.token_mask).enumerate() {
        if keep {
            let v = codebook.embed_text(vocab.token(id))?;
            data[i * dim..(i + 1) * dim].copy_from_slice(&v);
        }
    }
    Tensor::matrix(sentence.tokens.len(), dim, data)
}

pub fn residual_block(graph: &mut Graph, x: Var, block: &ResidualBlock, bound: &Bound) -> Result<Var> {
    let h = graph.linear(x, bound.var(block.w1), bound.var(block.b1))?;
    let h = graph.relu(h);
    let h = graph.linear(h, bound.var(block.w2), bound.var(block.b2))?;
    graph.add(x, h)
}

fn transformer_layer(
    graph: &mut Graph,
    x: Var,
    mask: &[bool],
    layer: &TransformerLayer,
    bound: &Bound,
) -> Result<Var> {
    let normed = graph.layer_norm(x, bound.var(layer.norm1_gain), bound.var(layer.norm1_bias))?;
    let mut heads = Vec::with_capacity(layer.heads.len());
    for h in &layer.heads {
        let q = graph.matmul(normed, bound.var(h.query))?;
        let k = graph.matmul(normed, bound.var(h.key))?;
        let v = graph.matmul(normed, bound.var(h.value))?;
        heads.push(graph.attention(q, k, v, mask)?);
    }
    let joined = graph.concat(&heads, 1)?;
    let attended = graph.linear(joined, bound.var(layer.out_weight), bound.var(layer.out_bias))?;
    let x = graph.add(x, attended)?;

    let normed = graph.layer_norm(x, bound.var(layer.norm2_gain), bound.var(layer.norm2_bias))?;
    let h = graph.linear(normed, bound.var(layer.ffn_in), bound.var(layer.ffn_in_bias))?;
    let h = graph.relu(h);
    let h = graph.linear(h, bound.var(layer.ffn_out), bound.var(layer.ffn_out_bias))?;
    graph.add(x, h)
}

/// Encodes a token matrix into the query vector `q ∈ R^{n_m}`.
pub fn encode_tokens(
    graph: &mut Graph,
    tokens: Tensor,
    mask: &[bool],
    params: &EncoderParams,
    bound: &Bound,
) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateInput("all tokens are masked".into()));
    }
    if tokens.rank() != 2 || tokens.shape()[0] != mask.len() {
        return Err(Error::InvalidArgument(format!(
            "token matrix {:?} does not match mask length {}",
            tokens.shape(),
            mask.len()
        )));
    }
    // Trailing padding cannot influence unmasked rows, so it is dropped.
    let used = mask.iter().rposition(|&m| m).map_or(0, |i| i + 1);
    let dim = tokens.shape()[1];
    let (tokens, mask) = if used < mask.len() {
        let mut data = tokens.into_data();
        data.truncate(used * dim);
        (Tensor::matrix(used, dim, data)?, &mask[..used])
    } else {
        (tokens, mask)
    };
    let mut x = graph.constant(tokens);
    for layer in &params.layers {
        x = transformer_layer(graph, x, mask, layer, bound)?;
    }
    let pooled = graph.masked_max_pool(x, mask)?;
    let mut q = graph.linear(pooled, bound.var(params.proj_weight), bound.var(params.proj_bias))?;
    for block in &params.blocks {
        q = residual_block(graph, q, block, bound)?;
    }
    Ok(q)
}

pub fn encode_criteria(
    graph: &mut Graph,
    sentence: &CriteriaSentence,
    vocab: &Vocabulary,
    codebook: &CodeBook,
    params: &EncoderParams,
    bound: &Bound,
) -> Result<Var> {
    let tokens = embed_tokens(sentence, vocab, codebook)?;
    encode_tokens(graph, tokens, &sentence.token_mask, params, bound)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::CriterionKind;
    use crate::ontology::{HashEmbedder, Ontology};
    use crate::tensor::grad_check;

    fn config() -> ModelConfig {
        ModelConfig {
            n_m: 4,
            n_e: 8,
            attention_heads: 2,
            ffn_multiplier: 2,
            ..ModelConfig::desk()
        }
    }

    fn fixture() -> (ParamStore, EncoderParams, Vocabulary, CodeBook) {
        let mut store = ParamStore::new();
        let params = EncoderParams::init(&mut store, &config(), &mut ChaCha8Rng::seed_from_u64(3));
        let vocab = Vocabulary::build(["history of type 2 diabetes", "no prior stroke"]);
        let book = CodeBook::new(
            Arc::new(Ontology::default()),
            Arc::new(HashEmbedder::new(8, 1)),
        );
        (store, params, vocab, book)
    }

    fn sentence(vocab: &Vocabulary, text: &str, n_s: usize) -> CriteriaSentence {
        let (tokens, token_mask) = vocab.encode(text, n_s);
        CriteriaSentence {
            criterion_id: "c".into(),
            trial_id: "t".into(),
            kind: CriterionKind::Inclusion,
            text: text.into(),
            tokens,
            token_mask,
        }
    }

    fn encode(store: &ParamStore, params: &EncoderParams, vocab: &Vocabulary, book: &CodeBook, s: &CriteriaSentence) -> Vec<f64> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let q = encode_criteria(&mut g, s, vocab, book, params, &bound).unwrap();
        g.value(q).data().to_vec()
    }

    #[test]
    fn token_rows_follow_the_mask() {
        let (_, _, vocab, book) = fixture();
        let one = embed_tokens(&sentence(&vocab, "stroke", 5), &vocab, &book).unwrap();
        let nonzero = (0..5).filter(|&r| one.row(r).iter().any(|&v| v != 0.0)).count();
        assert_eq!(nonzero, 1);
        let a = embed_tokens(&sentence(&vocab, "no prior stroke", 16), &vocab, &book).unwrap();
        let b = embed_tokens(&sentence(&vocab, "no prior stroke", 32), &vocab, &book).unwrap();
        assert_eq!(&a.data()[..3 * 8], &b.data()[..3 * 8]);
        let mut empty = sentence(&vocab, "stroke", 4);
        empty.token_mask = vec![false; 4];
        assert!(matches!(
            embed_tokens(&empty, &vocab, &book),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn padding_does_not_change_q() {
        let (store, params, vocab, book) = fixture();
        let text = "history of type 2 diabetes";
        let a = encode(&store, &params, &vocab, &book, &sentence(&vocab, text, 16));
        let b = encode(&store, &params, &vocab, &book, &sentence(&vocab, text, 32));
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
        assert_eq!(a, encode(&store, &params, &vocab, &book, &sentence(&vocab, text, 16)));
        let short = encode(&store, &params, &vocab, &book, &sentence(&vocab, "stroke", 16));
        assert_eq!(short.len(), 4);
    }

    #[test]
    fn zero_weights_give_zero_query() {
        let (mut store, params, vocab, book) = fixture();
        for id in params.ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let q = encode(&store, &params, &vocab, &book, &sentence(&vocab, "no prior stroke", 8));
        assert!(q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_block_cases() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = ResidualBlock {
            w1: store.add_glorot("w1", 3, 3, &mut rng),
            b1: store.add(
                "b1",
                Tensor::vector(vec![0.1, -0.4, 0.2]),
            ),
            w2: store.add_glorot("w2", 3, 3, &mut rng),
            b2: store.add("b2", Tensor::vector(vec![0.5, 0.0, -0.3])),
        };
        let x = [0.7, -1.2, 0.4];
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let xv = g.constant(Tensor::vector(x.to_vec()));
        let y = residual_block(&mut g, xv, &block, &bound).unwrap();

        // scalar re-evaluation, row-vector convention
        let (w1, b1, w2, b2) = (
            store.get(block.w1),
            store.get(block.b1).data(),
            store.get(block.w2),
            store.get(block.b2).data(),
        );
        let h: Vec<f64> = (0..3)
            .map(|j| ((0..3).map(|i| x[i] * w1.at(i, j)).sum::<f64>() + b1[j]).max(0.0))
            .collect();
        for j in 0..3 {
            let want = x[j] + (0..3).map(|i| h[i] * w2.at(i, j)).sum::<f64>() + b2[j];
            assert!((g.value(y).data()[j] - want).abs() <= 1e-12);
        }

        let mut zero = store.clone();
        for id in [block.w1, block.b1, block.w2, block.b2] {
            zero.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let bound = zero.bind(&mut g, false);
        let xv = g.constant(Tensor::vector(x.to_vec()));
        let y = residual_block(&mut g, xv, &block, &bound).unwrap();
        assert_eq!(g.value(y).data(), &x);

        zero.get_mut(block.b2).data_mut().copy_from_slice(&[1.5, -2.0, 0.25]);
        let mut g = Graph::new();
        let bound = zero.bind(&mut g, false);
        let xv = g.constant(Tensor::zeros(&[3]));
        let y = residual_block(&mut g, xv, &block, &bound).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let (store, params, vocab, book) = fixture();
        let s = sentence(&vocab, "no prior stroke", 5);
        let tokens = embed_tokens(&s, &vocab, &book).unwrap();
        let ids = params.ids();
        assert_eq!(ids.len(), store.len());
        let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let err = grad_check(
            |g, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                let q = encode_tokens(g, tokens.clone(), &s.token_mask, &params, &bound)?;
                let w = g.constant(Tensor::vector(vec![0.3, -0.7, 1.1, 0.2]));
                let qq = g.mul(q, q)?;
                g.dot(qq, w)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }
}
