//! Sentence encoding and context-attended object features.

use crate::gru::{bigru_backward, bigru_forward, BiGruParams, BiGruTrace};
use crate::tensor::{add_into, axpy, dot, softmax, softmax_backward, Real, Tensor};

crate::param_group! {
    /// `β(t, m) = wᵀ tanh(W1 s_t + W2 s_m + b)`
    pub struct ContextAttnParams { w1: Tensor, w2: Tensor, b: Tensor, w: Tensor }
}

impl<F: Real> ContextAttnParams<F> {
    pub fn zeros(word_feat: usize, attn: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[attn, word_feat]),
            w2: Tensor::zeros(&[attn, word_feat]),
            b: Tensor::zeros(&[attn]),
            w: Tensor::zeros(&[attn]),
        }
    }
}

/// Word features from a bidirectional GRU: `[words, 2 * hidden]`.
pub fn encode_words<F: Real>(embeddings: &Tensor<F>, p: &BiGruParams<F>) -> (Tensor<F>, BiGruTrace<F>) {
    bigru_forward(p, embeddings)
}

pub fn encode_words_backward<F: Real>(
    embeddings: &Tensor<F>,
    p: &BiGruParams<F>,
    trace: &BiGruTrace<F>,
    d_words: &Tensor<F>,
    g: &mut BiGruParams<F>,
) {
    bigru_backward(p, trace, embeddings, d_words, g);
}

/// Object features, one row per mentioned noun. Row 0 is the queried object.
#[derive(Clone, Debug)]
pub struct ObjectSet<F> {
    /// `[T, 2 * word_feat]`, each row `[s_t; õ_t]`.
    pub features: Tensor<F>,
    /// `[T, M]` context attention weights.
    pub attention: Tensor<F>,
    /// `[T * M, attn]` tanh activations.
    hidden: Tensor<F>,
}

impl<F: Real> ObjectSet<F> {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn main(&self) -> &[F] {
        self.features.row(0)
    }
}

pub fn build_objects<F: Real>(words: &Tensor<F>, nouns: &[usize], p: &ContextAttnParams<F>) -> ObjectSet<F> {
    let (m, sd) = (words.rows(), words.cols());
    let t = nouns.len();
    let a = p.b.len();
    let proj2: Vec<Vec<F>> = (0..m).map(|j| p.w2.mv(words.row(j))).collect();
    let mut features = Tensor::zeros(&[t, 2 * sd]);
    let mut attention = Tensor::zeros(&[t, m]);
    let mut hidden = Tensor::zeros(&[t * m, a]);
    for (ti, &noun) in nouns.iter().enumerate() {
        let mut base = p.w1.mv(words.row(noun));
        add_into(p.b.data(), &mut base);
        let mut logits = vec![F::zero(); m];
        for j in 0..m {
            let h = hidden.row_mut(ti * m + j);
            for i in 0..a {
                h[i] = (base[i] + proj2[j][i]).tanh();
            }
            logits[j] = dot(p.w.data(), h);
        }
        let att = softmax(&logits);
        let row = features.row_mut(ti);
        row[..sd].copy_from_slice(words.row(noun));
        for j in 0..m {
            axpy(att[j], words.row(j), &mut row[sd..]);
        }
        attention.row_mut(ti).copy_from_slice(&att);
    }
    ObjectSet {
        features,
        attention,
        hidden,
    }
}

/// Returns `dL/dwords` and accumulates parameter gradients.
pub fn build_objects_backward<F: Real>(
    words: &Tensor<F>,
    nouns: &[usize],
    p: &ContextAttnParams<F>,
    objects: &ObjectSet<F>,
    d_features: &Tensor<F>,
    g: &mut ContextAttnParams<F>,
) -> Tensor<F> {
    let (m, sd) = (words.rows(), words.cols());
    let a = p.b.len();
    let mut d_words = Tensor::zeros(words.shape());
    for (ti, &noun) in nouns.iter().enumerate() {
        let dfeat = d_features.row(ti);
        add_into(&dfeat[..sd], d_words.row_mut(noun));
        let d_ctx = &dfeat[sd..];
        let att = objects.attention.row(ti);
        let mut d_att = vec![F::zero(); m];
        for j in 0..m {
            d_att[j] = dot(d_ctx, words.row(j));
            axpy(att[j], d_ctx, d_words.row_mut(j));
        }
        let d_logits = softmax_backward(att, &d_att);
        let mut du_sum = vec![F::zero(); a];
        for j in 0..m {
            let h = objects.hidden.row(ti * m + j);
            axpy(d_logits[j], h, g.w.data_mut());
            let du: Vec<F> = (0..a)
                .map(|i| d_logits[j] * p.w.data()[i] * (F::one() - h[i] * h[i]))
                .collect();
            g.w2.outer_acc(&du, words.row(j));
            p.w2.matvec_t_acc(&du, d_words.row_mut(j));
            add_into(&du, &mut du_sum);
        }
        g.w1.outer_acc(&du_sum, words.row(noun));
        add_into(&du_sum, g.b.data_mut());
        p.w1.matvec_t_acc(&du_sum, d_words.row_mut(noun));
    }
    d_words
}
