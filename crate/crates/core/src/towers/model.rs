use std::collections::BTreeMap;

use crate::dataset::{DatasetSplits, ItemStats, SequenceExample, PAD};
use crate::error::{Error, Result};
use crate::tape::{multi_interest_score, ParamId, Tape, Var, XentSpec};
use crate::tensor::Mat;

use super::params::TowerParams;

/// Records the forward pass of both towers on a [`Tape`].
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a TowerParams,
    vars: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a TowerParams) -> Self {
        Self {
            tape: Tape::new(),
            params,
            vars: vec![None; params.len()],
        }
    }

    fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let v = self.tape.param(id, self.params.get(id));
        self.vars[id] = Some(v);
        v
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let num_items = self.params.config.num_items;
        match ids.iter().find(|&&i| i as usize >= num_items) {
            Some(&id) => Err(Error::IndexOutOfRange { id, num_items }),
            None => Ok(()),
        }
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.p(w);
        let b = self.p(b);
        let y = self.tape.matmul(x, w);
        self.tape.add_bias(y, b)
    }

    /// Item tower: embedding lookup followed by the MLP, optionally
    /// L2-normalized. Returns an `n x d` node.
    pub fn items(&mut self, ids: &[u32], normalize: bool) -> Result<Var> {
        self.check_ids(ids)?;
        let layout = &self.params.layout;
        let table = layout.item_embedding;
        let mlp = layout.item_mlp.clone();
        let mut x = self.tape.gather(table, self.params.get(table), ids);
        for (l, &(w, b)) in mlp.iter().enumerate() {
            x = self.linear(x, w, b);
            if l + 1 < mlp.len() {
                x = self.tape.gelu(x);
            }
        }
        if normalize {
            x = self.tape.normalize_rows(x);
        }
        Ok(x)
    }

    /// Causal self-attention encoder over real (unpadded) items. Row `i` of
    /// the result only depends on items `0..=i`, so the first `k` rows equal
    /// the encoding of the length-`k` prefix.
    pub fn encode(&mut self, items: &[u32]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::EmptyContext);
        }
        self.check_ids(items)?;
        let cfg = &self.params.config;
        if items.len() > cfg.max_len {
            return Err(Error::InvalidConfig(format!(
                "context of {} items exceeds max_len {}",
                items.len(),
                cfg.max_len
            )));
        }
        let heads = cfg.attention_heads;
        let layout = self.params.layout.clone();
        let positions: Vec<u32> = (0..items.len() as u32).collect();
        let emb = self.tape.gather(
            layout.user_embedding,
            self.params.get(layout.user_embedding),
            items,
        );
        let pos = self.tape.gather(
            layout.positions,
            self.params.get(layout.positions),
            &positions,
        );
        let mut x = self.tape.add(emb, pos);
        for l in &layout.layers {
            let (g, b) = (self.p(l.ln1_gain), self.p(l.ln1_bias));
            let a = self.tape.layer_norm(x, g, b);
            let q = self.linear(a, l.wq, l.bq);
            let k = self.linear(a, l.wk, l.bk);
            let v = self.linear(a, l.wv, l.bv);
            let att = self.tape.causal_attention(q, k, v, heads);
            let att = self.linear(att, l.wo, l.bo);
            x = self.tape.add(x, att);
            let (g, b) = (self.p(l.ln2_gain), self.p(l.ln2_bias));
            let a = self.tape.layer_norm(x, g, b);
            let f = self.linear(a, l.ff1_w, l.ff1_b);
            let f = self.tape.gelu(f);
            let f = self.linear(f, l.ff2_w, l.ff2_b);
            x = self.tape.add(x, f);
        }
        if let Some((g, b)) = layout.final_norm {
            let (g, b) = (self.p(g), self.p(b));
            x = self.tape.layer_norm(x, g, b);
        }
        Ok(x)
    }

    /// Parametric attention over the first `len` hidden states: `M x d`.
    pub fn interests(&mut self, hidden: Var, len: usize) -> Var {
        let q = self.p(self.params.layout.queries);
        self.tape.parametric_attention(q, hidden, len)
    }

    pub fn scores(&mut self, interests: &[Var], items: Var) -> Var {
        self.tape.multi_interest_scores(interests, items)
    }
}

/// Item-tower representations of `ids` (`n x d`).
pub fn item_forward(params: &TowerParams, ids: &[u32]) -> Result<Mat> {
    let mut g = Graph::new(params);
    let v = g.items(ids, false)?;
    Ok(g.tape.value(v).clone())
}

/// Representations of the whole catalog, row `i` for item `i`.
pub fn all_item_representations(params: &TowerParams, normalize: bool) -> Mat {
    let ids: Vec<u32> = (0..params.config.num_items as u32).collect();
    let mut g = Graph::new(params);
    let v = g.items(&ids, normalize).expect("catalog ids are in range");
    g.tape.value(v).clone()
}

/// Encodes a left-padded context; only the last `valid_len` slots are read.
pub fn user_encode(params: &TowerParams, context: &[u32], valid_len: usize) -> Result<Mat> {
    if valid_len == 0 {
        return Err(Error::EmptyContext);
    }
    if valid_len > context.len() {
        return Err(Error::InvalidConfig(format!(
            "valid_len {valid_len} exceeds context length {}",
            context.len()
        )));
    }
    let items = &context[context.len() - valid_len..];
    if items.contains(&PAD) {
        return Err(Error::InvalidConfig(
            "padding inside the valid region".into(),
        ));
    }
    let mut g = Graph::new(params);
    let h = g.encode(items)?;
    Ok(g.tape.value(h).clone())
}

/// Attention-pools the first `valid_len` rows of `hidden` with every query
/// vector: row `m` is `z^(m)`.
pub fn extract_interests(params: &TowerParams, hidden: &Mat, valid_len: usize) -> Result<Mat> {
    if valid_len == 0 || valid_len > hidden.rows {
        return Err(Error::EmptyContext);
    }
    let mut tape = Tape::new();
    let q = tape.param(params.layout.queries, params.get(params.layout.queries));
    let h = tape.constant(hidden.clone());
    let z = tape.parametric_attention(q, h, valid_len);
    Ok(tape.value(z).clone())
}

/// Interest set (`M x d`) for an unpadded context.
pub fn user_interests(params: &TowerParams, items: &[u32]) -> Result<Mat> {
    let mut g = Graph::new(params);
    let h = g.encode(items)?;
    let z = g.interests(h, items.len());
    Ok(g.tape.value(z).clone())
}

/// Affinity between an interest set and one item representation.
pub fn score(interests: &Mat, item: &[f64]) -> f64 {
    let mut dots = vec![0.0; interests.rows];
    let mut weights = vec![0.0; interests.rows];
    multi_interest_score(interests, item, &mut dots, &mut weights)
}

/// Subtracts `log p(y)` from every column `y` of `logits`.
pub fn logq_correct(logits: &Mat, probs: &[f64]) -> Result<Mat> {
    if probs.len() != logits.cols {
        return Err(Error::InvalidStats(format!(
            "{} sampling probabilities for {} candidates",
            probs.len(),
            logits.cols
        )));
    }
    if let Some(j) = probs.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::InvalidStats(format!(
            "candidate column {j} has sampling probability {}",
            probs[j]
        )));
    }
    let mut out = logits.clone();
    for i in 0..out.rows {
        for (x, p) in out.row_mut(i).iter_mut().zip(probs) {
            *x -= p.ln();
        }
    }
    Ok(out)
}

/// Loss modifiers selected by the training strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOptions {
    /// Focal exponent; zero is plain cross entropy.
    pub focal_gamma: f64,
    /// Per-item margin subtracted from the positive logit.
    pub margins: Option<Vec<f64>>,
    /// L2-normalize item representations before scoring.
    pub item_norm: bool,
    /// Mask in-batch candidates that come from the same user as the row.
    pub mask_same_user: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            focal_gamma: 0.0,
            margins: None,
            item_norm: false,
            mask_same_user: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoredBatch {
    /// Interest sets of every example.
    pub interests: Vec<Mat>,
    /// Candidate item representations, one row per batch label.
    pub items: Mat,
    pub logits: Mat,
    /// LogQ-corrected logits with margins and masks applied.
    pub corrected: Mat,
    pub probs: Mat,
    pub loss: f64,
    pub per_example_loss: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Candidate mask: for row `i`, column `j ≠ i` is excluded when it carries
/// the same label or (optionally) comes from the same user.
pub fn in_batch_mask(batch: &[SequenceExample], mask_same_user: bool) -> Vec<bool> {
    let b = batch.len();
    let mut mask = vec![false; b * b];
    for (i, ei) in batch.iter().enumerate() {
        for (j, ej) in batch.iter().enumerate() {
            if i != j && (ej.label == ei.label || (mask_same_user && ej.owner == ei.owner)) {
                mask[i * b + j] = true;
            }
        }
    }
    mask
}

/// In-batch sampled softmax with LogQ correction. Candidates are the batch
/// labels; the loss is the weighted negative log-likelihood averaged over the
/// batch. Returns the scored batch and gradients for every tensor.
pub fn batch_softmax_loss(
    params: &TowerParams,
    splits: &DatasetSplits,
    batch: &[SequenceExample],
    stats: &ItemStats,
    weights: &[f64],
    opts: &LossOptions,
) -> Result<(ScoredBatch, Vec<Mat>)> {
    if batch.len() < 2 {
        return Err(Error::DegenerateBatch(batch.len()));
    }
    assert_eq!(weights.len(), batch.len(), "one weight per example");
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "example weight {w} is not a finite nonnegative"
        )));
    }
    let labels: Vec<u32> = batch.iter().map(|e| e.label).collect();
    let label_probs: Vec<f64> = labels.iter().map(|&y| stats.probability(y)).collect();
    if let Some(j) = label_probs.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::InvalidStats(format!(
            "batch label {} has zero sampling probability",
            labels[j]
        )));
    }

    let mut g = Graph::new(params);
    // One encoder pass per window, long enough for its longest context here.
    let mut longest: BTreeMap<u32, usize> = BTreeMap::new();
    for ex in batch {
        let e = longest.entry(ex.window).or_default();
        *e = (*e).max(ex.valid_len as usize);
    }
    let mut hidden: BTreeMap<u32, Var> = BTreeMap::new();
    for (&w, &len) in &longest {
        let items = &splits.windows[w as usize].items[..len];
        hidden.insert(w, g.encode(items)?);
    }
    let interests: Vec<Var> = batch
        .iter()
        .map(|ex| g.interests(hidden[&ex.window], ex.valid_len as usize))
        .collect();
    let items = g.items(&labels, opts.item_norm)?;
    let logits = g.scores(&interests, items);

    let offsets: Vec<f64> = label_probs.iter().map(|p| -p.ln()).collect();
    let margins: Vec<f64> = match &opts.margins {
        Some(m) => labels.iter().map(|&y| m[y as usize]).collect(),
        None => vec![0.0; batch.len()],
    };
    let mask = in_batch_mask(batch, opts.mask_same_user);
    let targets: Vec<usize> = (0..batch.len()).collect();
    let (loss, out) = g.tape.softmax_xent(
        logits,
        &XentSpec {
            targets: &targets,
            mask: &mask,
            offsets: &offsets,
            margins: &margins,
            weights,
            focal_gamma: opts.focal_gamma,
            denom: batch.len() as f64,
        },
    );
    let mut grads = params.zeros_like();
    g.tape.backward(loss, &mut grads);
    let scored = ScoredBatch {
        interests: interests.iter().map(|&z| g.tape.value(z).clone()).collect(),
        items: g.tape.value(items).clone(),
        logits: g.tape.value(logits).clone(),
        corrected: out.adjusted,
        probs: out.probs,
        loss: out.loss,
        per_example_loss: out.per_row,
        weights: weights.to_vec(),
    };
    Ok((scored, grads))
}
