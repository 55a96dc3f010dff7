//! Compute and memory accounting for packed versus naive training, plus a
//! small scaling-study driver that renders its measurements as CSV.

use crate::convo::{
    conversation_stats, validate_conversation, Conversation, ConversationStats, Turn,
    ValidatedConversation, ValidationError,
};
use crate::model::{Model, ModelConfig, ModelError, Precision, Scalar};
use crate::oracle::expand_to_passes;
use crate::pack::{build_token_mask, pack, PackError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error("wall-clock model covers {model} tokens but the corpus draws from {corpus}")]
    WallVocabulary { model: usize, corpus: u32 },
    #[error("unknown cost mode '{0}' (naive, naive_bound, packed)")]
    UnknownMode(String),
}

/// Which training scheme the accounting describes.
///
/// `Naive` sums the exact per-pass costs. `NaiveBound` is the pessimistic
/// envelope `n_passes * max_pass_len^2` often quoted for the per-turn
/// scheme; it is reported separately so the default comparison stays exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostMode {
    Naive,
    NaiveBound,
    Packed,
}

impl CostMode {
    pub const ALL: [CostMode; 3] = [CostMode::Naive, CostMode::NaiveBound, CostMode::Packed];

    pub fn as_str(self) -> &'static str {
        match self {
            CostMode::Naive => "naive",
            CostMode::NaiveBound => "naive_bound",
            CostMode::Packed => "packed",
        }
    }
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CostMode {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(CostMode::Naive),
            "naive_bound" => Ok(CostMode::NaiveBound),
            "packed" => Ok(CostMode::Packed),
            other => Err(CostError::UnknownMode(other.to_string())),
        }
    }
}

/// Length of naive pass i (1-based): all earlier turns' human and response
/// tokens, then the current turn's human, reasoning, and response.
fn pass_lens(stats: &ConversationStats) -> Vec<u64> {
    let mut lens = Vec::with_capacity(stats.n_turns);
    let mut cum = 0u64;
    for i in 0..stats.n_turns {
        cum += (stats.h_lens[i] + stats.r_lens[i]) as u64;
        lens.push(cum + stats.t_lens[i] as u64);
    }
    lens
}

/// Total attention-matrix cells evaluated over a whole conversation: one
/// `len^2` grid per forward pass (the mask is materialized and scored for
/// every query/key pair, visible or not).
pub fn attention_cells(stats: &ConversationStats, mode: CostMode) -> u64 {
    let lens = pass_lens(stats);
    match mode {
        CostMode::Naive => lens.iter().map(|&l| l * l).sum(),
        CostMode::NaiveBound => {
            let max = lens.iter().copied().max().unwrap_or(0);
            stats.n_turns as u64 * max * max
        }
        CostMode::Packed => {
            let l = stats.packed_len as u64;
            l * l
        }
    }
}

/// Largest single attention mask held in memory at any point.
pub fn peak_mask_cells(stats: &ConversationStats, mode: CostMode) -> u64 {
    match mode {
        CostMode::Naive | CostMode::NaiveBound => {
            let max = pass_lens(stats).iter().copied().max().unwrap_or(0);
            max * max
        }
        CostMode::Packed => {
            let l = stats.packed_len as u64;
            l * l
        }
    }
}

/// Total input tokens fed through the model.
pub fn input_tokens(stats: &ConversationStats, mode: CostMode) -> u64 {
    let lens = pass_lens(stats);
    match mode {
        CostMode::Naive => lens.iter().sum(),
        CostMode::NaiveBound => {
            stats.n_turns as u64 * lens.iter().copied().max().unwrap_or(0)
        }
        CostMode::Packed => stats.packed_len as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub mode: CostMode,
    pub n_turns: usize,
    pub input_len: u64,
    pub attention_cells: u64,
    /// Attention score flops under the `cells * d_model` convention.
    pub flops: u64,
    pub peak_mask_cells: u64,
}

pub fn cost_report(stats: &ConversationStats, mode: CostMode, d_model: usize) -> CostReport {
    let cells = attention_cells(stats, mode);
    CostReport {
        mode,
        n_turns: stats.n_turns,
        input_len: input_tokens(stats, mode),
        attention_cells: cells,
        flops: cells * d_model as u64,
        peak_mask_cells: peak_mask_cells(stats, mode),
    }
}

/// Deterministic synthetic conversation: `n_turns` turns whose segments have
/// the given fixed lengths and whose tokens are drawn uniformly below
/// `vocab`.
pub fn synth_conversation(
    n_turns: usize,
    h_len: usize,
    t_len: usize,
    r_len: usize,
    vocab: u32,
    seed: u64,
) -> Result<ValidatedConversation, ValidationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut turns = Vec::with_capacity(n_turns);
    for _ in 0..n_turns {
        let mut draw = |len: usize| (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let h = draw(h_len);
        let t = draw(t_len);
        let r = draw(r_len);
        turns.push(Turn::new(h, t, r));
    }
    let raw = Conversation {
        id: format!("synth-n{n_turns}-l{h_len}.{t_len}.{r_len}-s{seed}"),
        turns,
    };
    validate_conversation(raw, Some(vocab))
}

/// Least-squares line through (ln x, ln y).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Option<ScalingFit> {
    if points.len() < 2 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return None;
    }
    let n = points.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for &(x, y) in points {
        sx += x.ln();
        sy += y.ln();
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in points {
        let dx = x.ln() - mx;
        sxx += dx * dx;
        sxy += dx * (y.ln() - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(ScalingFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// Under the equal-segment growth model (every segment `l` tokens, so pass i
/// processes about `2*i*l` tokens), the smallest turn count where the packed
/// pass costs fewer attention cells than the per-turn passes combined.
pub fn equal_segment_crossover() -> usize {
    let mut naive = 0u64;
    for n in 1u64.. {
        naive += (2 * n) * (2 * n);
        if (4 * n) * (4 * n) < naive {
            return n as usize;
        }
    }
    unreachable!("quadratic packed cost falls below cubic naive cost")
}

/// One scaling study: synthesize equal-segment conversations at each turn
/// count and account for every requested mode. Wall-clock timing is opt-in
/// because it needs a concrete model.
#[derive(Debug, Clone)]
pub struct StudySpec {
    pub n_turns: Vec<usize>,
    pub seg_len: usize,
    pub d_model: usize,
    pub vocab: u32,
    pub seed: u64,
    pub modes: Vec<CostMode>,
    pub wall_model: Option<ModelConfig>,
}

impl StudySpec {
    pub fn new(n_turns: Vec<usize>, seg_len: usize, d_model: usize) -> Self {
        StudySpec {
            n_turns,
            seg_len,
            d_model,
            vocab: 97,
            seed: 7,
            modes: vec![CostMode::Naive, CostMode::Packed],
            wall_model: None,
        }
    }

    pub fn with_modes(mut self, modes: Vec<CostMode>) -> Self {
        self.modes = modes;
        self
    }

    pub fn with_wall_model(mut self, cfg: ModelConfig) -> Self {
        self.wall_model = Some(cfg);
        self
    }
}

impl Default for StudySpec {
    fn default() -> Self {
        StudySpec::new(vec![2, 4, 8, 16, 32], 16, 64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub mode: CostMode,
    pub n_turns: usize,
    pub seg_len: usize,
    pub d_model: usize,
    pub input_len: u64,
    pub attention_cells: u64,
    pub flops: u64,
    pub peak_mask_cells: u64,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
}

pub const STUDY_CSV_HEADER: &str =
    "mode,n_turns,len,d,input_len,attention_cells,flops,peak_mask_cells,wall_ms";

impl StudyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(STUDY_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let wall = r.wall_ms.map(|w| format!("{w:.3}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.mode,
                r.n_turns,
                r.seg_len,
                r.d_model,
                r.input_len,
                r.attention_cells,
                r.flops,
                r.peak_mask_cells,
                wall
            ));
        }
        out
    }

    /// Log-log slope of attention cells against turn count for one mode.
    pub fn fit(&self, mode: CostMode) -> Option<ScalingFit> {
        let points: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| (r.n_turns as f64, r.attention_cells as f64))
            .collect();
        fit_loglog_slope(&points)
    }
}

pub fn run_scaling_study(spec: &StudySpec) -> Result<StudyReport, CostError> {
    if let Some(cfg) = &spec.wall_model {
        if (cfg.vocab_size as u64) < spec.vocab as u64 {
            return Err(CostError::WallVocabulary {
                model: cfg.vocab_size,
                corpus: spec.vocab,
            });
        }
    }
    let mut rows = Vec::with_capacity(spec.n_turns.len() * spec.modes.len());
    for &n in &spec.n_turns {
        let c = synth_conversation(
            n,
            spec.seg_len,
            spec.seg_len,
            spec.seg_len,
            spec.vocab,
            spec.seed ^ (n as u64).wrapping_mul(0x9e37_79b9),
        )?;
        let stats = conversation_stats(&c);
        for &mode in &spec.modes {
            let report = cost_report(&stats, mode, spec.d_model);
            let wall_ms = match &spec.wall_model {
                Some(cfg) if mode != CostMode::NaiveBound => {
                    Some(measure_wall_ms(cfg, &c, mode)?)
                }
                _ => None,
            };
            rows.push(StudyRow {
                mode,
                n_turns: n,
                seg_len: spec.seg_len,
                d_model: spec.d_model,
                input_len: report.input_len,
                attention_cells: report.attention_cells,
                flops: report.flops,
                peak_mask_cells: report.peak_mask_cells,
                wall_ms,
            });
        }
    }
    Ok(StudyReport { rows })
}

fn measure_wall_ms(
    cfg: &ModelConfig,
    c: &ValidatedConversation,
    mode: CostMode,
) -> Result<f64, CostError> {
    match cfg.precision {
        Precision::Double => measure_wall_ms_typed::<f64>(cfg, c, mode),
        Precision::Single => measure_wall_ms_typed::<f32>(cfg, c, mode),
    }
}

fn measure_wall_ms_typed<F: Scalar>(
    cfg: &ModelConfig,
    c: &ValidatedConversation,
    mode: CostMode,
) -> Result<f64, CostError> {
    let model: Model<F> = Model::init(cfg)?;
    match mode {
        CostMode::Packed => {
            let packed = pack(c);
            let mask = build_token_mask(&packed.table, usize::MAX)?;
            let start = Instant::now();
            model.forward(&packed.tokens, &packed.position_ids, &mask)?;
            Ok(start.elapsed().as_secs_f64() * 1e3)
        }
        CostMode::Naive => {
            let passes = expand_to_passes(c);
            let start = Instant::now();
            for pass in &passes {
                model.forward(&pass.tokens, &pass.position_ids, &pass.mask)?;
            }
            Ok(start.elapsed().as_secs_f64() * 1e3)
        }
        CostMode::NaiveBound => unreachable!("bound mode is never timed"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convo::testutil::{c1, singleton};
    use crate::model::PositionalFamily;

    #[test]
    fn two_turn_example_cell_counts() {
        let stats = conversation_stats(&c1());
        assert_eq!(attention_cells(&stats, CostMode::Naive), 52); // 4^2 + 6^2
        assert_eq!(attention_cells(&stats, CostMode::Packed), 81); // 9^2
        assert_eq!(attention_cells(&stats, CostMode::NaiveBound), 72); // 2 * 6^2
        assert_eq!(peak_mask_cells(&stats, CostMode::Naive), 36);
        assert_eq!(peak_mask_cells(&stats, CostMode::Packed), 81);
        assert_eq!(input_tokens(&stats, CostMode::Naive), 10);
        assert_eq!(input_tokens(&stats, CostMode::Packed), 9);
    }

    #[test]
    fn single_turn_peaks() {
        let stats = conversation_stats(&singleton());
        assert_eq!(peak_mask_cells(&stats, CostMode::Naive), 9);
        assert_eq!(peak_mask_cells(&stats, CostMode::Packed), 16);
        assert_eq!(attention_cells(&stats, CostMode::Naive), 9);
        assert_eq!(attention_cells(&stats, CostMode::Packed), 16);
    }

    #[test]
    fn naive_cells_match_expanded_pass_lengths() {
        // uneven segment lengths, including an empty reasoning span
        let raw = Conversation {
            id: "uneven".into(),
            turns: vec![
                Turn::new(vec![1, 2, 3], vec![4, 5], vec![6]),
                Turn::new(vec![7], vec![], vec![8, 9, 10, 11]),
                Turn::new(vec![12, 13], vec![14], vec![15]),
            ],
        };
        let c = validate_conversation(raw, None).unwrap();
        let stats = conversation_stats(&c);
        let brute: u64 = expand_to_passes(&c)
            .iter()
            .map(|p| (p.tokens.len() * p.tokens.len()) as u64)
            .sum();
        assert_eq!(attention_cells(&stats, CostMode::Naive), brute);
        let packed_len: u64 = c
            .turns()
            .iter()
            .map(|t| (t.human.len() + t.reasoning.len() + 2 * t.response.len()) as u64)
            .sum();
        assert_eq!(
            attention_cells(&stats, CostMode::Packed),
            packed_len * packed_len
        );
    }

    #[test]
    fn synth_conversations_are_deterministic_and_sized() {
        let a = synth_conversation(3, 4, 2, 5, 50, 11).unwrap();
        let b = synth_conversation(3, 4, 2, 5, 50, 11).unwrap();
        assert_eq!(a.as_conversation(), b.as_conversation());
        let other = synth_conversation(3, 4, 2, 5, 50, 12).unwrap();
        assert_ne!(a.as_conversation(), other.as_conversation());
        for t in a.turns() {
            assert_eq!((t.human.len(), t.reasoning.len(), t.response.len()), (4, 2, 5));
            assert!(t.human.iter().all(|tok| tok.0 < 50));
        }
    }

    #[test]
    fn loglog_fit_recovers_exact_powers() {
        let cubic: Vec<(f64, f64)> = (1..=6).map(|n| (n as f64, (n as f64).powi(3))).collect();
        let fit = fit_loglog_slope(&cubic).unwrap();
        assert!((fit.slope - 3.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
        assert!(fit_loglog_slope(&cubic[..1]).is_none());
        assert!(fit_loglog_slope(&[(1.0, 1.0), (0.0, 2.0)]).is_none());
    }

    fn band_report() -> StudyReport {
        let spec = StudySpec::new(vec![8, 16, 32, 64, 128], 16, 64)
            .with_modes(vec![CostMode::Naive, CostMode::Packed]);
        run_scaling_study(&spec).unwrap()
    }

    #[test]
    fn packed_cells_scale_quadratically_naive_nearly_cubically() {
        let report = band_report();
        let naive = report.fit(CostMode::Naive).unwrap();
        let packed = report.fit(CostMode::Packed).unwrap();
        assert!((packed.slope - 2.0).abs() < 1e-9, "packed {}", packed.slope);
        assert!((naive.slope - 2.8868).abs() < 1e-3, "naive {}", naive.slope);
        assert!(naive.slope > 2.5 && naive.slope < 3.0);
    }

    #[test]
    fn packed_peak_mask_approaches_four_naive_peaks() {
        let report = band_report();
        let at = |mode, n| {
            report
                .rows
                .iter()
                .find(|r| r.mode == mode && r.n_turns == n)
                .unwrap()
                .peak_mask_cells as f64
        };
        let ratio = at(CostMode::Packed, 128) / (at(CostMode::Naive, 128));
        let expect = (512.0f64 / 257.0).powi(2);
        assert!((ratio - expect).abs() < 1e-9);
        assert!((ratio - 4.0).abs() / 4.0 < 0.05);
    }

    #[test]
    fn csv_has_pinned_header_and_default_shape() {
        let report = run_scaling_study(&StudySpec::default()).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], STUDY_CSV_HEADER);
        assert_eq!(lines.len(), 11); // header + 5 turn counts x 2 modes
        // default rows carry no wall measurement: trailing field empty
        assert!(lines[1].ends_with(','));
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first[0], "naive");
        assert_eq!(first[1], "2");
        assert_eq!(first[2], "16");
        assert_eq!(first[3], "64");
        // flops column is cells * d
        let cells: u64 = first[5].parse().unwrap();
        let flops: u64 = first[6].parse().unwrap();
        assert_eq!(flops, cells * 64);
    }

    #[test]
    fn wall_clock_rows_are_populated_when_requested() {
        let cfg = ModelConfig::new(64, 8, 1, 1).with_seed(3);
        let spec = StudySpec {
            n_turns: vec![1, 2],
            seg_len: 2,
            d_model: 8,
            vocab: 64,
            seed: 5,
            modes: vec![CostMode::Naive, CostMode::NaiveBound, CostMode::Packed],
            wall_model: Some(cfg),
        };
        let report = run_scaling_study(&spec).unwrap();
        assert_eq!(report.rows.len(), 6);
        for row in &report.rows {
            match row.mode {
                CostMode::NaiveBound => assert!(row.wall_ms.is_none()),
                _ => assert!(row.wall_ms.unwrap() >= 0.0),
            }
        }
    }

    #[test]
    fn wall_clock_model_must_cover_corpus_vocab() {
        let cfg = ModelConfig::new(16, 8, 1, 1);
        let spec = StudySpec {
            vocab: 97,
            wall_model: Some(cfg),
            ..StudySpec::default()
        };
        assert_eq!(
            run_scaling_study(&spec).unwrap_err(),
            CostError::WallVocabulary {
                model: 16,
                corpus: 97
            }
        );
    }

    #[test]
    fn crossover_turn_count_under_growth_model() {
        assert_eq!(equal_segment_crossover(), 11);
        // with exact pass lengths (2i+1)l the crossover lands earlier; the
        // growth model drops the current turn's own segments from the count
        let exact = (1u64..)
            .find(|&n| {
                let naive: u64 = (1..=n).map(|i| (2 * i + 1) * (2 * i + 1)).sum();
                (4 * n) * (4 * n) < naive
            })
            .unwrap();
        assert_eq!(exact, 9);
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in CostMode::ALL {
            assert_eq!(mode.as_str().parse::<CostMode>().unwrap(), mode);
        }
        assert!(matches!(
            "fast".parse::<CostMode>(),
            Err(CostError::UnknownMode(_))
        ));
    }

    #[test]
    fn wall_model_accepts_both_positional_families() {
        for fam in [PositionalFamily::Rotary, PositionalFamily::Sinusoidal] {
            let cfg = ModelConfig::new(64, 8, 1, 1).with_positional(fam);
            let spec = StudySpec {
                n_turns: vec![1],
                seg_len: 1,
                d_model: 8,
                vocab: 64,
                seed: 1,
                modes: vec![CostMode::Packed],
                wall_model: Some(cfg),
            };
            let report = run_scaling_study(&spec).unwrap();
            assert!(report.rows[0].wall_ms.is_some());
        }
    }
}
