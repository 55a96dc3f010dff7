//! Property tests that pit the packed layout against an independently
//! written expansion of the per-turn passes. Nothing here reuses the
//! library's own correspondence code: the expected sets are rebuilt from
//! segment lengths alone.

use proptest::prelude::*;
use turnpack_core::{
    attention_cells, conversation_stats, labeled_predictions, pack, pack_batch,
    validate_conversation, Conversation, CostMode, TokenId, Turn, ValidatedConversation,
};

fn conversations(max_turns: usize, max_len: usize) -> impl Strategy<Value = ValidatedConversation> {
    prop::collection::vec((1..=max_len, 0..=max_len, 1..=max_len), 1..=max_turns).prop_map(
        |lens| {
            let mut next_tok = 0u32;
            let mut fill = |n: usize| -> Vec<u32> {
                (0..n)
                    .map(|_| {
                        next_tok += 1;
                        next_tok % 97
                    })
                    .collect()
            };
            let turns = lens
                .into_iter()
                .map(|(h, t, r)| Turn::new(fill(h), fill(t), fill(r)))
                .collect();
            validate_conversation(
                Conversation {
                    id: "prop".into(),
                    turns,
                },
                Some(97),
            )
            .expect("generated lengths satisfy validation")
        },
    )
}

/// Packed position of each token of pass `pass` (1-based), in pass order,
/// derived directly from segment lengths. Within the packed sequence a turn
/// occupies [base, base + h + t + 2r): human, reasoning, context response
/// copy, generation response copy.
fn pass_to_packed(c: &ValidatedConversation, pass: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut base = 0usize;
    for (j, turn) in c.turns().iter().enumerate().take(pass) {
        let (h, t, r) = (turn.human.len(), turn.reasoning.len(), turn.response.len());
        for o in 0..h {
            out.push(base + o);
        }
        if j + 1 == pass {
            for o in 0..t {
                out.push(base + h + o);
            }
            for o in 0..r {
                out.push(base + h + t + r + o);
            }
        } else {
            for o in 0..r {
                out.push(base + h + t + o);
            }
        }
        base += h + t + 2 * r;
    }
    out
}

/// The tokens of pass `pass`, rebuilt from the turns.
fn pass_tokens(c: &ValidatedConversation, pass: usize) -> Vec<TokenId> {
    let mut out = Vec::new();
    for (j, turn) in c.turns().iter().enumerate().take(pass) {
        out.extend_from_slice(&turn.human);
        if j + 1 == pass {
            out.extend_from_slice(&turn.reasoning);
        }
        out.extend_from_slice(&turn.response);
    }
    out
}

proptest! {
    /// Every token of every pass sees, in the packed mask, exactly the
    /// packed image of its causal prefix in that pass.
    #[test]
    fn packed_visibility_equals_pass_prefixes(c in conversations(6, 5)) {
        let packed = pack(&c);
        let mask = packed.mask.as_ref().unwrap();
        for pass in 1..=c.n_turns() {
            let map = pass_to_packed(&c, pass);
            for (q, &packed_q) in map.iter().enumerate() {
                let expected: std::collections::BTreeSet<usize> =
                    map[..=q].iter().copied().collect();
                let got: std::collections::BTreeSet<usize> =
                    mask.visible_set(packed_q).into_iter().collect();
                prop_assert_eq!(&got, &expected, "pass {} query {}", pass, q);
            }
        }
    }

    /// Packed position IDs equal the token's index in every pass that
    /// contains it.
    #[test]
    fn position_ids_equal_pass_indices(c in conversations(6, 5)) {
        let packed = pack(&c);
        for pass in 1..=c.n_turns() {
            for (q, &packed_q) in pass_to_packed(&c, pass).iter().enumerate() {
                prop_assert_eq!(packed.position_ids[packed_q] as usize, q);
            }
        }
    }

    /// The include mask selects one prediction per reasoning and response
    /// token, nothing else, and every selected position's target is the
    /// next token of its own pass.
    #[test]
    fn include_mass_and_targets_match_passes(c in conversations(6, 5)) {
        let packed = pack(&c);
        let wanted: usize = c
            .turns()
            .iter()
            .map(|t| t.reasoning.len() + t.response.len())
            .sum();
        prop_assert_eq!(packed.n_included(), wanted);
        let preds = labeled_predictions(&packed);
        prop_assert_eq!(preds.len(), wanted);
        for lp in preds {
            let toks = pass_tokens(&c, lp.pass);
            prop_assert_eq!(lp.target, toks[lp.pass_predictor + 1]);
            let map = pass_to_packed(&c, lp.pass);
            prop_assert_eq!(map[lp.pass_predictor], lp.packed_predictor);
        }
    }

    /// The cost model's exact naive account equals squared pass lengths.
    #[test]
    fn naive_cell_count_is_sum_of_squared_pass_lengths(c in conversations(6, 5)) {
        let stats = conversation_stats(&c);
        let brute: u64 = (1..=c.n_turns())
            .map(|p| {
                let l = pass_to_packed(&c, p).len() as u64;
                l * l
            })
            .sum();
        prop_assert_eq!(attention_cells(&stats, CostMode::Naive), brute);
        let l = packed_len(&c) as u64;
        prop_assert_eq!(attention_cells(&stats, CostMode::Packed), l * l);
        prop_assert_eq!(stats.packed_len, packed_len(&c));
    }

    /// Batch padding never disturbs content rows and pads with inert rows.
    #[test]
    fn batch_padding_is_inert(cs in prop::collection::vec(conversations(4, 4), 1..4)) {
        let solo: Vec<_> = cs.iter().map(pack).collect();
        let batch = pack_batch(&cs, TokenId(0)).unwrap();
        let width = solo.iter().map(|p| p.len()).max().unwrap();
        prop_assert_eq!(batch.width, width);
        for (item, orig) in batch.items.iter().zip(&solo) {
            let n = item.content_len();
            prop_assert_eq!(n, orig.len());
            prop_assert_eq!(&item.tokens[..n], &orig.tokens[..]);
            prop_assert_eq!(item.n_included(), orig.n_included());
            let mask = item.mask.as_ref().unwrap();
            for p in n..width {
                prop_assert!(!item.include[p]);
                prop_assert_eq!(item.targets[p], None);
                for k in 0..width {
                    prop_assert_eq!(mask.allowed(p, k), p == k);
                    prop_assert_eq!(mask.allowed(k, p), p == k);
                }
            }
        }
    }
}

fn packed_len(c: &ValidatedConversation) -> usize {
    c.turns()
        .iter()
        .map(|t| t.human.len() + t.reasoning.len() + 2 * t.response.len())
        .sum()
}
