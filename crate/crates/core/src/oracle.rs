//! The ground truth the packed layout must reproduce: one forward pass per
//! turn over the naive inputs, and the machinery to compare per-token losses
//! between that expansion and the packed single pass.

use crate::convo::{TokenId, ValidatedConversation};
use crate::mask::BoolMask;
use crate::model::{nll, Model, ModelConfig, ModelError, Precision, Scalar};
use crate::pack::{build_token_mask, pack, PackedConversation, SegmentKind, SegmentTable};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("token {token} does not fit model vocabulary {vocab}")]
    VocabularyMismatch { token: u32, vocab: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Input of naive pass i: full history of earlier turns, then this turn's
/// human message, reasoning, and response, under a plain causal mask with
/// sequential positions. Loss is carried by the reasoning and response
/// predictions, same as training turn i alone.
#[derive(Debug, Clone, PartialEq)]
pub struct PassInput {
    /// 1-based turn index.
    pub pass: usize,
    pub tokens: Vec<TokenId>,
    pub position_ids: Vec<u32>,
    pub mask: BoolMask,
    pub targets: Vec<Option<TokenId>>,
    pub include: Vec<bool>,
}

/// Materialize all N naive passes of a conversation.
pub fn expand_to_passes(c: &ValidatedConversation) -> Vec<PassInput> {
    let n = c.n_turns();
    let mut passes = Vec::with_capacity(n);
    for i in 1..=n {
        let mut tokens: Vec<TokenId> = Vec::new();
        for turn in &c.turns()[..i - 1] {
            tokens.extend_from_slice(&turn.human);
            tokens.extend_from_slice(&turn.response);
        }
        let cur = &c.turns()[i - 1];
        let gen_start = tokens.len() + cur.human.len();
        tokens.extend_from_slice(&cur.human);
        tokens.extend_from_slice(&cur.reasoning);
        tokens.extend_from_slice(&cur.response);
        let len = tokens.len();
        let mut targets = vec![None; len];
        let mut include = vec![false; len];
        // predictions that carry loss: everything from the last human token
        // through the second-to-last response token predicts t_i / r_i
        for p in gen_start - 1..len - 1 {
            targets[p] = Some(tokens[p + 1]);
            include[p] = true;
        }
        passes.push(PassInput {
            pass: i,
            tokens,
            position_ids: (0..len as u32).collect(),
            mask: BoolMask::causal(len),
            targets,
            include,
        });
    }
    passes
}

/// Where a packed token lives inside the naive expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassLocation {
    /// Reasoning and generation-copy response tokens appear in their own
    /// pass only.
    Generated { pass: usize, index: usize },
    /// Human and context-copy response tokens appear in every pass from
    /// `first_pass` on, always at the same index.
    Context { first_pass: usize, index: usize },
}

/// Maps each packed position to its location(s) in the naive passes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceMap {
    locations: Vec<PassLocation>,
    n_turns: usize,
}

impl CorrespondenceMap {
    pub fn location(&self, packed_pos: usize) -> PassLocation {
        self.locations[packed_pos]
    }

    pub fn locations(&self) -> &[PassLocation] {
        &self.locations
    }

    /// Index of this packed token inside pass `pass`, if that pass contains
    /// it.
    pub fn index_in_pass(&self, packed_pos: usize, pass: usize) -> Option<usize> {
        match self.locations[packed_pos] {
            PassLocation::Generated { pass: p, index } if p == pass => Some(index),
            PassLocation::Generated { .. } => None,
            PassLocation::Context { first_pass, index } => {
                (first_pass <= pass && pass <= self.n_turns).then_some(index)
            }
        }
    }

    /// Number of packed positions that belong to exactly one pass (the
    /// reasoning and generation-copy tokens).
    pub fn n_generated(&self) -> usize {
        self.locations
            .iter()
            .filter(|l| matches!(l, PassLocation::Generated { .. }))
            .count()
    }
}

/// Build the packed-to-pass correspondence from the layout alone.
pub fn token_correspondence(table: &SegmentTable) -> CorrespondenceMap {
    let mut locations = vec![PassLocation::Context { first_pass: 0, index: 0 }; table.total_len()];
    // index of h_i inside passes >= i is cum(i) = sum over j < i of |h_j| + |r_j|
    let mut cum = 0usize;
    for turn in 1..=table.n_turns() {
        let h = table.segment(SegmentKind::Human, turn);
        let t = table.segment(SegmentKind::Reasoning, turn);
        let ri = table.segment(SegmentKind::ResponseIn, turn);
        let ro = table.segment(SegmentKind::ResponseOut, turn);
        for o in 0..h.len() {
            locations[h.start + o] = PassLocation::Context {
                first_pass: turn,
                index: cum + o,
            };
        }
        for o in 0..t.len() {
            locations[t.start + o] = PassLocation::Generated {
                pass: turn,
                index: cum + h.len() + o,
            };
        }
        for o in 0..ri.len() {
            // as context the response sits right after its human message
            // (reasoning is gone from history), starting with pass turn+1
            locations[ri.start + o] = PassLocation::Context {
                first_pass: turn + 1,
                index: cum + h.len() + o,
            };
        }
        for o in 0..ro.len() {
            locations[ro.start + o] = PassLocation::Generated {
                pass: turn,
                index: cum + h.len() + t.len() + o,
            };
        }
        cum += h.len() + ri.len();
    }
    CorrespondenceMap {
        locations,
        n_turns: table.n_turns(),
    }
}

/// One loss-carrying prediction, located in both layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledPrediction {
    pub packed_predictor: usize,
    pub pass: usize,
    pub pass_predictor: usize,
    pub target: TokenId,
}

/// Enumerate the loss-carrying predictions of a packed conversation in
/// generation-stream order (turn by turn; inside a turn, the last human
/// token, then reasoning, then the generation response copy).
pub fn labeled_predictions(packed: &PackedConversation) -> Vec<LabeledPrediction> {
    let table = &packed.table;
    let map = token_correspondence(table);
    let mut out = Vec::new();
    for turn in 1..=table.n_turns() {
        let h = table.segment(SegmentKind::Human, turn);
        let t = table.segment(SegmentKind::Reasoning, turn);
        let ro = table.segment(SegmentKind::ResponseOut, turn);
        let predictors = std::iter::once(h.end - 1)
            .chain(t.start..t.end)
            .chain(ro.start..ro.end - 1);
        for p in predictors {
            out.push(LabeledPrediction {
                packed_predictor: p,
                pass: turn,
                pass_predictor: map
                    .index_in_pass(p, turn)
                    .expect("predictors of turn i are present in pass i"),
                target: packed.targets[p].expect("predictor positions carry targets"),
            });
        }
    }
    out
}

/// Outcome of one packed-vs-naive comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub conversation_id: String,
    pub positional: &'static str,
    pub precision: Precision,
    pub tolerance: f64,
    pub n_labeled: usize,
    /// |packed NLL - naive NLL| per labeled prediction, stream order.
    pub per_token_abs_diff: Vec<f64>,
    pub max_abs_diff: f64,
    /// Worst logit-row disagreement over labeled predictor positions.
    pub max_logit_abs_diff: f64,
    pub packed_total_nll: f64,
    pub npass_total_nll: f64,
    pub passed: bool,
}

/// Pack the conversation, expand it to naive passes, run the model over
/// both, and compare the per-token losses of every labeled prediction.
pub fn run_equivalence<F: Scalar>(
    c: &ValidatedConversation,
    model: &Model<F>,
    tolerance: f64,
) -> Result<EquivalenceReport, OracleError> {
    let packed = pack(c);
    let passes = expand_to_passes(c);
    compare_packed_to_passes(&packed, &passes, model, tolerance)
}

/// The comparison itself, split out so tests can mutate the packed input
/// (mask bits, position ids) before running it.
pub fn compare_packed_to_passes<F: Scalar>(
    packed: &PackedConversation,
    passes: &[PassInput],
    model: &Model<F>,
    tolerance: f64,
) -> Result<EquivalenceReport, OracleError> {
    let vocab = model.cfg.vocab_size;
    for tok in &packed.tokens {
        if tok.0 as usize >= vocab {
            return Err(OracleError::VocabularyMismatch {
                token: tok.0,
                vocab,
            });
        }
    }
    // The packer skips the dense mask above its cap; rebuild it here so the
    // comparison works on any input, however it was packed.
    let rebuilt;
    let mask = match packed.mask.as_ref() {
        Some(m) => m,
        None => {
            rebuilt = build_token_mask(&packed.table, usize::MAX)
                .expect("an uncapped token mask always builds");
            &rebuilt
        }
    };
    let packed_out = model.forward(&packed.tokens, &packed.position_ids, mask)?;
    let packed_nll = nll(&packed_out, &packed.targets, &packed.include)?;

    let mut pass_outs = Vec::with_capacity(passes.len());
    let mut npass_total = 0.0f64;
    for pass in passes {
        let out = model.forward(&pass.tokens, &pass.position_ids, &pass.mask)?;
        let losses = nll(&out, &pass.targets, &pass.include)?;
        npass_total += losses.total.to_f64();
        pass_outs.push((out, losses));
    }

    let mut per_token_abs_diff = Vec::new();
    let mut max_abs_diff = 0.0f64;
    let mut max_logit_abs_diff = 0.0f64;
    for lp in labeled_predictions(packed) {
        let (pass_out, pass_nll) = &pass_outs[lp.pass - 1];
        let a = packed_nll.per_token[lp.packed_predictor]
            .expect("labeled predictors are included in the packed loss")
            .to_f64();
        let b = pass_nll.per_token[lp.pass_predictor]
            .expect("labeled predictors are included in the pass loss")
            .to_f64();
        let diff = (a - b).abs();
        per_token_abs_diff.push(diff);
        max_abs_diff = max_abs_diff.max(diff);
        for cidx in 0..vocab {
            let dl = (packed_out.logits[[lp.packed_predictor, cidx]].to_f64()
                - pass_out.logits[[lp.pass_predictor, cidx]].to_f64())
            .abs();
            max_logit_abs_diff = max_logit_abs_diff.max(dl);
        }
    }

    Ok(EquivalenceReport {
        conversation_id: packed.id.clone(),
        positional: model.cfg.positional.as_str(),
        precision: F::PRECISION,
        tolerance,
        n_labeled: per_token_abs_diff.len(),
        max_abs_diff,
        max_logit_abs_diff,
        per_token_abs_diff,
        packed_total_nll: packed_nll.total.to_f64(),
        npass_total_nll: npass_total,
        passed: max_abs_diff <= tolerance,
    })
}

/// Run the equivalence check at the precision named in the config, with the
/// default tolerance for that precision unless one is given.
pub fn verify_with_config(
    c: &ValidatedConversation,
    cfg: &ModelConfig,
    tolerance: Option<f64>,
) -> Result<EquivalenceReport, OracleError> {
    let tol = tolerance.unwrap_or_else(|| cfg.precision.default_tolerance());
    match cfg.precision {
        Precision::Double => {
            let model: Model<f64> = Model::init(cfg)?;
            run_equivalence(c, &model, tol)
        }
        Precision::Single => {
            let model: Model<f32> = Model::init(cfg)?;
            run_equivalence(c, &model, tol)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convo::testutil::{c1, singleton};
    use crate::model::{init_model, PositionalFamily};
    use crate::pack::build_layout;

    #[test]
    fn passes_of_c1() {
        let passes = expand_to_passes(&c1());
        assert_eq!(passes.len(), 2);
        let toks = |p: &PassInput| p.tokens.iter().map(|t| t.0).collect::<Vec<_>>();
        assert_eq!(toks(&passes[0]), vec![11, 12, 21, 31]);
        assert_eq!(toks(&passes[1]), vec![11, 12, 31, 13, 22, 32]);
        assert_eq!(passes[1].position_ids, vec![0, 1, 2, 3, 4, 5]);
        // pass 2 predicts t_2 and r_2 from the last human token onward
        assert_eq!(passes[1].include, vec![false, false, false, true, true, false]);
        assert_eq!(passes[1].targets[3], Some(TokenId(22)));
        assert_eq!(passes[1].targets[4], Some(TokenId(32)));
        assert!(passes[1].mask.allowed(5, 0) && !passes[1].mask.allowed(0, 5));
    }

    #[test]
    fn pass_lengths_grow_with_history() {
        // equal segment lengths l make pass i exactly (2i+1) * l long
        let c = crate::cost::synth_conversation(4, 3, 3, 3, 50, 9).unwrap();
        let passes = expand_to_passes(&c);
        for (i, p) in passes.iter().enumerate() {
            assert_eq!(p.tokens.len(), (2 * (i + 1) + 1) * 3);
        }
    }

    #[test]
    fn correspondence_for_c1() {
        let table = build_layout(&c1());
        let map = token_correspondence(&table);
        // generation copy of r_2 (packed 8) appears only in pass 2, index 5
        assert_eq!(
            map.location(8),
            PassLocation::Generated { pass: 2, index: 5 }
        );
        assert_eq!(map.index_in_pass(8, 1), None);
        // context copy of r_1 (packed 3) sits at index 2 of every later pass
        assert_eq!(
            map.location(3),
            PassLocation::Context {
                first_pass: 2,
                index: 2
            }
        );
        assert_eq!(map.index_in_pass(3, 2), Some(2));
        assert_eq!(map.index_in_pass(3, 1), None);
        // h_1 is part of every pass
        assert_eq!(map.index_in_pass(0, 1), Some(0));
        assert_eq!(map.index_in_pass(0, 2), Some(0));
        let wanted: usize = c1()
            .turns()
            .iter()
            .map(|t| t.reasoning.len() + t.response.len())
            .sum();
        assert_eq!(map.n_generated(), wanted);
    }

    #[test]
    fn labeled_predictions_line_up_with_include() {
        for c in [c1(), singleton()] {
            let packed = pack(&c);
            let preds = labeled_predictions(&packed);
            let from_include: Vec<usize> = (0..packed.len())
                .filter(|&p| packed.include[p])
                .collect();
            let mut from_preds: Vec<usize> =
                preds.iter().map(|lp| lp.packed_predictor).collect();
            from_preds.sort_unstable();
            assert_eq!(from_preds, from_include);
            // pass predictor predicts the same target in its own pass
            let passes = expand_to_passes(&c);
            for lp in preds {
                assert_eq!(
                    passes[lp.pass - 1].targets[lp.pass_predictor],
                    Some(lp.target)
                );
            }
        }
    }

    fn tiny_model(positional: PositionalFamily) -> Model<f64> {
        let cfg = ModelConfig::new(97, 16, 2, 2)
            .with_seed(1234)
            .with_positional(positional);
        init_model(&cfg).unwrap()
    }

    #[test]
    fn packed_loss_equals_npass_loss_rotary() {
        let model = tiny_model(PositionalFamily::Rotary);
        let report = run_equivalence(&c1(), &model, 1e-9).unwrap();
        assert!(report.passed, "max diff {}", report.max_abs_diff);
        assert_eq!(report.n_labeled, 4);
        assert!(report.max_logit_abs_diff <= 1e-9);
        assert!(
            (report.packed_total_nll - report.npass_total_nll).abs()
                <= 1e-9 * report.npass_total_nll.abs()
        );
    }

    #[test]
    fn packed_loss_equals_npass_loss_sinusoidal() {
        let model = tiny_model(PositionalFamily::Sinusoidal);
        let report = run_equivalence(&c1(), &model, 1e-9).unwrap();
        assert!(report.passed, "max diff {}", report.max_abs_diff);
    }

    #[test]
    fn single_turn_equivalence_is_near_exact() {
        let model = tiny_model(PositionalFamily::Rotary);
        let report = run_equivalence(&singleton(), &model, 1e-12).unwrap();
        assert!(report.passed, "max diff {}", report.max_abs_diff);
    }

    #[test]
    fn single_precision_equivalence_within_loose_tolerance() {
        let cfg = ModelConfig::new(97, 16, 2, 2)
            .with_seed(77)
            .with_precision(Precision::Single);
        let report = verify_with_config(&c1(), &cfg, None).unwrap();
        assert_eq!(report.tolerance, 1e-4);
        assert!(report.passed, "max diff {}", report.max_abs_diff);
    }

    #[test]
    fn vocabulary_mismatch_is_reported() {
        let cfg = ModelConfig::new(20, 16, 1, 2).with_seed(0);
        let model: Model<f64> = init_model(&cfg).unwrap();
        let err = run_equivalence(&c1(), &model, 1e-9).unwrap_err();
        assert_eq!(
            err,
            OracleError::VocabularyMismatch {
                token: 21,
                vocab: 20
            }
        );
    }

    #[test]
    fn flipping_reasoning_visibility_breaks_equivalence() {
        let model = tiny_model(PositionalFamily::Rotary);
        let mut packed = pack(&c1());
        let passes = expand_to_passes(&c1());
        // let t_2 see t_1 (packed 6 -> 2): earlier-turn reasoning must stay
        // hidden, and row 6 carries loss, so the leak must show up
        let mask = packed.mask.as_mut().unwrap();
        mask.set(6, 2, true);
        let report = compare_packed_to_passes(&packed, &passes, &model, 1e-9).unwrap();
        assert!(!report.passed);
        assert!(report.max_abs_diff > 1e-9);
    }

    #[test]
    fn perturbing_a_labeled_position_id_breaks_equivalence() {
        for positional in [PositionalFamily::Rotary, PositionalFamily::Sinusoidal] {
            let model = tiny_model(positional);
            let mut packed = pack(&c1());
            let passes = expand_to_passes(&c1());
            packed.position_ids[6] += 1; // t_2
            let report = compare_packed_to_passes(&packed, &passes, &model, 1e-9).unwrap();
            assert!(!report.passed, "family {:?} missed the perturbation", positional);
        }
    }
}
