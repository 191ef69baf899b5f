//! Group-parallel generation: greedy and beam search that emit K tokens per
//! decoder invocation, lockstep batched decoding, and latency measurement.
//!
//! No decoder state is cached between invocations; every network call
//! recomputes the full prefix. The speedup story is carried by invocation
//! counts and wall-clock measurement, both of which stay valid.

use std::time::{Duration, Instant};

use crate::data::{BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::masks::relaxed_causal_mask;
use crate::model::SatModel;
use crate::tensor::log_softmax_row;

/// Decode-time options. `beam == 1` selects greedy search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchConfig {
    /// Tokens emitted per decoder invocation (K).
    pub group_size: usize,
    pub beam: usize,
    /// Cap on returned (visible) tokens.
    pub max_len: usize,
    pub bos: u32,
    pub eos: u32,
}

impl SearchConfig {
    pub fn greedy(group_size: usize, max_len: usize) -> Self {
        SearchConfig {
            group_size,
            beam: 1,
            max_len,
            bos: BOS_ID,
            eos: EOS_ID,
        }
    }

    pub fn beam(group_size: usize, beam: usize, max_len: usize) -> Self {
        SearchConfig {
            beam,
            ..SearchConfig::greedy(group_size, max_len)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::invalid("group_size must be >= 1"));
        }
        if self.beam == 0 {
            return Err(Error::invalid("beam must be >= 1"));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("max_len must be >= 1"));
        }
        Ok(())
    }
}

/// Counters for one decoded sentence.
///
/// For greedy search `decoder_invocations == ceil(emitted_length / K)`
/// always, where `emitted_length` counts produced positions up to and
/// including the first terminator (or every produced position when no
/// terminator appeared). For beam search `decoder_invocations` counts
/// network update rounds, each processing all live hypotheses at once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeStats {
    pub decoder_invocations: usize,
    pub wall_time: Duration,
    pub emitted_length: usize,
}

/// A partial or complete decode: emitted target ids (terminator excluded),
/// cumulative log-probability, completion flag, and the next group index.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
    pub group_cursor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
    pub stats: DecodeStats,
}

/// Anything the searches can drive: an encoder plus a decoder that returns
/// per-position log-probabilities for the newest group.
pub trait DecoderModel {
    type State;

    fn encode_source(&self, src: &[u32]) -> Result<Self::State>;

    fn vocab_size(&self) -> usize;

    /// Log-probability rows for the final `k` positions of each item, given
    /// the full (already shifted) decoder input. Items must share one input
    /// length; one call counts as one decoder invocation regardless of the
    /// number of items.
    fn group_log_probs(
        &self,
        items: &[(&Self::State, &[u32])],
        k: usize,
    ) -> Result<Vec<Vec<f64>>>;
}

impl DecoderModel for SatModel {
    type State = crate::model::EncStates;

    fn encode_source(&self, src: &[u32]) -> Result<Self::State> {
        self.encode(src)
    }

    fn vocab_size(&self) -> usize {
        self.hp.tgt_vocab
    }

    fn group_log_probs(
        &self,
        items: &[(&Self::State, &[u32])],
        k: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let n = items
            .first()
            .map(|(_, inputs)| inputs.len())
            .ok_or_else(|| Error::invalid("group_log_probs: no items"))?;
        let mask = relaxed_causal_mask(n, k)?;
        let logits = self.decoder_logits_batch(items, &mask)?;
        let v = self.hp.tgt_vocab;
        let mut out = Vec::with_capacity(items.len());
        for rows in logits {
            let mut lp = vec![0.0f64; k * v];
            for (j, row) in rows[(n - k) * v..].chunks(v).enumerate() {
                let row64: Vec<f64> = row.iter().map(|&x| x as f64).collect();
                log_softmax_row(&row64, &mut lp[j * v..(j + 1) * v]);
            }
            out.push(lp);
        }
        Ok(out)
    }
}

/// The decoder input that predicts positions `0..len + k` of a hypothesis
/// whose first `len` tokens are known: `k` start symbols, then the tokens.
fn shifted_inputs(tokens: &[u32], k: usize, bos: u32) -> Vec<u32> {
    let mut inputs = Vec::with_capacity(tokens.len() + k);
    inputs.resize(k, bos);
    inputs.extend_from_slice(tokens);
    inputs
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct SentenceProgress<S> {
    state: S,
    tokens: Vec<u32>,
    logprob: f64,
    finished: bool,
    done: bool,
    invocations: usize,
    /// Produced positions including a terminator, tracked per sentence.
    emitted_length: usize,
}

/// Greedy group decoding over a batch in lockstep: one network invocation per
/// group round covers every still-active sentence.
pub fn greedy_decode_batch<M: DecoderModel>(
    model: &M,
    sources: &[&[u32]],
    config: &SearchConfig,
) -> Result<Vec<DecodeOutput>> {
    config.validate()?;
    if sources.is_empty() {
        return Err(Error::invalid("decode: empty batch"));
    }
    let started = Instant::now();
    let k = config.group_size;

    let mut sentences: Vec<SentenceProgress<M::State>> = Vec::with_capacity(sources.len());
    for src in sources {
        sentences.push(SentenceProgress {
            state: model.encode_source(src)?,
            tokens: Vec::new(),
            logprob: 0.0,
            finished: false,
            done: false,
            invocations: 0,
            emitted_length: 0,
        });
    }

    loop {
        let active: Vec<usize> = (0..sentences.len())
            .filter(|&i| !sentences[i].done)
            .collect();
        if active.is_empty() {
            break;
        }
        let inputs: Vec<Vec<u32>> = active
            .iter()
            .map(|&i| shifted_inputs(&sentences[i].tokens, k, config.bos))
            .collect();
        let items: Vec<(&M::State, &[u32])> = active
            .iter()
            .zip(&inputs)
            .map(|(&i, inp)| (&sentences[i].state, inp.as_slice()))
            .collect();
        let log_probs = model.group_log_probs(&items, k)?;

        let v = model.vocab_size();
        for (slot, &i) in active.iter().enumerate() {
            let s = &mut sentences[i];
            s.invocations += 1;
            let rows = &log_probs[slot];
            for j in 0..k {
                let row = &rows[j * v..(j + 1) * v];
                let token = argmax(row) as u32;
                s.logprob += row[token as usize];
                s.emitted_length += 1;
                if token == config.eos {
                    s.finished = true;
                    s.done = true;
                    break;
                }
                s.tokens.push(token);
            }
            if !s.done && s.tokens.len() >= config.max_len {
                s.done = true;
            }
        }
    }

    let wall = started.elapsed();
    let per_sentence = wall / sources.len() as u32;
    Ok(sentences
        .into_iter()
        .map(|s| {
            debug_assert_eq!(s.invocations, s.emitted_length.div_ceil(k));
            let mut tokens = s.tokens;
            tokens.truncate(config.max_len);
            DecodeOutput {
                tokens,
                logprob: s.logprob,
                finished: s.finished,
                stats: DecodeStats {
                    decoder_invocations: s.invocations,
                    wall_time: per_sentence,
                    emitted_length: s.emitted_length,
                },
            }
        })
        .collect())
}

/// Greedy group decoding of a single sentence.
pub fn greedy_decode<M: DecoderModel>(
    model: &M,
    src: &[u32],
    config: &SearchConfig,
) -> Result<DecodeOutput> {
    let mut out = greedy_decode_batch(model, &[src], config)?;
    Ok(out.pop().expect("one sentence in, one out"))
}

/// In-group partial expansion: parent hypothesis index, tokens chosen inside
/// the current group, and the running score.
struct Partial {
    parent: usize,
    group_tokens: Vec<u32>,
    score: f64,
}

/// Beam search over groups: one network round scores all live hypotheses,
/// then the K positions are expanded word by word against those fixed
/// distributions with top-`beam` pruning per word. Ties break toward the
/// lexicographically smaller token sequence, which makes `beam == 1`
/// reproduce greedy search exactly.
pub fn beam_search_decode<M: DecoderModel>(
    model: &M,
    src: &[u32],
    config: &SearchConfig,
) -> Result<DecodeOutput> {
    config.validate()?;
    let started = Instant::now();
    let k = config.group_size;
    let v = model.vocab_size();
    let state = model.encode_source(src)?;

    let mut live: Vec<Hypothesis> = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
        group_cursor: 0,
    }];
    let mut best_finished: Option<Hypothesis> = None;
    let mut rounds = 0usize;

    while !live.is_empty() {
        let inputs: Vec<Vec<u32>> = live
            .iter()
            .map(|h| shifted_inputs(&h.tokens, k, config.bos))
            .collect();
        let items: Vec<(&M::State, &[u32])> =
            inputs.iter().map(|inp| (&state, inp.as_slice())).collect();
        let log_probs = model.group_log_probs(&items, k)?;
        rounds += 1;

        let mut partials: Vec<Partial> = (0..live.len())
            .map(|parent| Partial {
                parent,
                group_tokens: Vec::new(),
                score: live[parent].logprob,
            })
            .collect();

        for j in 0..k {
            let mut next: Vec<Partial> = Vec::with_capacity(partials.len() * v);
            for p in &partials {
                let row = &log_probs[p.parent][j * v..(j + 1) * v];
                for (t, &lp) in row.iter().enumerate() {
                    let score = p.score + lp;
                    if t as u32 == config.eos {
                        let mut tokens = live[p.parent].tokens.clone();
                        tokens.extend_from_slice(&p.group_tokens);
                        let candidate = Hypothesis {
                            tokens,
                            logprob: score,
                            finished: true,
                            group_cursor: rounds,
                        };
                        if better(&candidate, best_finished.as_ref()) {
                            best_finished = Some(candidate);
                        }
                    } else {
                        let mut group_tokens = Vec::with_capacity(p.group_tokens.len() + 1);
                        group_tokens.extend_from_slice(&p.group_tokens);
                        group_tokens.push(t as u32);
                        next.push(Partial {
                            parent: p.parent,
                            group_tokens,
                            score,
                        });
                    }
                }
            }
            next.sort_by(|a, b| {
                b.score.total_cmp(&a.score).then_with(|| {
                    (&live[a.parent].tokens, &a.group_tokens)
                        .cmp(&(&live[b.parent].tokens, &b.group_tokens))
                })
            });
            next.truncate(config.beam);
            partials = next;
        }

        live = partials
            .into_iter()
            .map(|p| {
                let mut tokens = live[p.parent].tokens.clone();
                tokens.extend_from_slice(&p.group_tokens);
                Hypothesis {
                    tokens,
                    logprob: p.score,
                    finished: false,
                    group_cursor: rounds,
                }
            })
            .collect();

        live.retain(|h| h.tokens.len() < config.max_len);
        // Scores only decrease with length, so once the best finished
        // hypothesis outscores every live one no extension can win.
        if let Some(bf) = &best_finished {
            live.retain(|h| h.logprob > bf.logprob);
        }
    }

    let best = match best_finished {
        Some(h) => h,
        None => {
            return Err(Error::invalid(
                "beam search exhausted max_len without a finished hypothesis",
            ))
        }
    };
    let emitted = best.tokens.len() + 1;
    let mut tokens = best.tokens;
    tokens.truncate(config.max_len);
    Ok(DecodeOutput {
        tokens,
        logprob: best.logprob,
        finished: true,
        stats: DecodeStats {
            decoder_invocations: rounds,
            wall_time: started.elapsed(),
            emitted_length: emitted,
        },
    })
}

/// Strictly better under (score, then lexicographically smaller tokens).
fn better(candidate: &Hypothesis, incumbent: Option<&Hypothesis>) -> bool {
    match incumbent {
        None => true,
        Some(inc) => match candidate.logprob.total_cmp(&inc.logprob) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => candidate.tokens < inc.tokens,
        },
    }
}

/// Decode a batch, order-aligned with the input. Greedy runs in lockstep as
/// one batched stream of invocations; beam search runs per sentence.
pub fn batch_decode<M: DecoderModel>(
    model: &M,
    sources: &[&[u32]],
    config: &SearchConfig,
) -> Result<Vec<DecodeOutput>> {
    config.validate()?;
    if sources.is_empty() {
        return Err(Error::invalid("decode: empty batch"));
    }
    if config.beam == 1 {
        greedy_decode_batch(model, sources, config)
    } else {
        sources
            .iter()
            .map(|src| beam_search_decode(model, src, config))
            .collect()
    }
}

// ── latency measurement ──────────────────────────────────────────────

/// One (K, batch size) measurement cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyCell {
    pub group_size: usize,
    pub batch_size: usize,
    /// Median over repetitions of mean per-sentence wall time.
    pub mean_ms: f64,
    /// Decoder invocations for one pass over the sample.
    pub invocations: usize,
    /// Relative to the K=1 cell at the same batch size, when present.
    pub speedup_vs_k1: Option<f64>,
}

/// Sweep decode-time group sizes and batch sizes over a fixed sample,
/// reporting mean per-sentence wall time and invocation counts per cell.
///
/// Repetitions run cell-interleaved (every cell once per repetition) so a
/// load spike hits all cells alike; each cell keeps its median repetition.
/// Requires at least 3 repetitions beyond the untimed warmup pass.
pub fn measure_latency<M: DecoderModel>(
    model: &M,
    sample: &[&[u32]],
    group_sizes: &[usize],
    batch_sizes: &[usize],
    config: &SearchConfig,
    repetitions: usize,
) -> Result<Vec<LatencyCell>> {
    if repetitions < 3 {
        return Err(Error::invalid("measure_latency: need at least 3 repetitions"));
    }
    if sample.is_empty() {
        return Err(Error::invalid("measure_latency: empty sample"));
    }
    if group_sizes.is_empty() || batch_sizes.is_empty() {
        return Err(Error::invalid("measure_latency: empty sweep axes"));
    }

    let run_cell = |k: usize, batch: usize| -> Result<(f64, usize)> {
        let cfg = SearchConfig {
            group_size: k,
            ..*config
        };
        let start = Instant::now();
        let mut invocations = 0usize;
        for chunk in sample.chunks(batch) {
            for out in batch_decode(model, chunk, &cfg)? {
                invocations += out.stats.decoder_invocations;
            }
        }
        let ms = start.elapsed().as_secs_f64() * 1000.0 / sample.len() as f64;
        Ok((ms, invocations))
    };

    let cells: Vec<(usize, usize)> = group_sizes
        .iter()
        .flat_map(|&k| batch_sizes.iter().map(move |&b| (k, b)))
        .collect();

    // Warmup pass, untimed.
    for &(k, b) in &cells {
        run_cell(k, b)?;
    }
    let mut times: Vec<Vec<f64>> = vec![Vec::with_capacity(repetitions); cells.len()];
    let mut invocations = vec![0usize; cells.len()];
    for _ in 0..repetitions {
        for (c, &(k, b)) in cells.iter().enumerate() {
            let (ms, inv) = run_cell(k, b)?;
            times[c].push(ms);
            invocations[c] = inv;
        }
    }

    let mut out: Vec<LatencyCell> = cells
        .iter()
        .zip(times)
        .zip(&invocations)
        .map(|((&(k, b), mut ms), &inv)| {
            ms.sort_by(f64::total_cmp);
            LatencyCell {
                group_size: k,
                batch_size: b,
                mean_ms: ms[ms.len() / 2],
                invocations: inv,
                speedup_vs_k1: None,
            }
        })
        .collect();

    for i in 0..out.len() {
        let base = out
            .iter()
            .find(|c| c.group_size == 1 && c.batch_size == out[i].batch_size)
            .map(|c| c.mean_ms);
        out[i].speedup_vs_k1 = base.map(|b| b / out[i].mean_ms);
    }
    Ok(out)
}

/// Column-aligned text rendering of a latency sweep.
pub fn render_latency_table(cells: &[LatencyCell]) -> String {
    let mut lines = vec![format!(
        "{:>4} {:>6} {:>12} {:>12} {:>12}",
        "K", "batch", "mean_ms", "invocations", "speedup"
    )];
    for c in cells {
        let speedup = c
            .speedup_vs_k1
            .map(|s| format!("{s:.2}x"))
            .unwrap_or_else(|| "-".into());
        lines.push(format!(
            "{:>4} {:>6} {:>12.3} {:>12} {:>12}",
            c.group_size, c.batch_size, c.mean_ms, c.invocations, speedup
        ));
    }
    lines.join("\n") + "\n"
}

/// Tab-separated rendering, one row per cell.
pub fn latency_table_tsv(cells: &[LatencyCell]) -> String {
    let mut out = String::from("k\tbatch\tmean_ms\tinvocations\tspeedup_vs_k1\n");
    for c in cells {
        let speedup = c
            .speedup_vs_k1
            .map(|s| format!("{s:.4}"))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{}\t{}\n",
            c.group_size, c.batch_size, c.mean_ms, c.invocations, speedup
        ));
    }
    out
}
