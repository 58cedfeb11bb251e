//! Synthetic "toy codec" corpus.
//!
//! Text is a sequence of pseudo-words from a fixed lexicon. Every speaker
//! renders a word as one of a few audio n-grams `[content(w), p_1 .. p_m]`:
//! the content token is shared by all speakers and lives in `[0, V/2)`,
//! the prosody tokens `p_i` come from the speaker's own peaked voice
//! distribution over `[V/2, V)`, and `m` is the speaker's rate.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::training::CorpusRecord;

const ONSETS: [&str; 12] = ["k", "l", "m", "t", "r", "s", "v", "p", "n", "d", "b", "g"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pseudo-word for lexicon entry `i`.
pub fn word(i: usize) -> String {
    let syl = |j: usize| format!("{}{}", ONSETS[j % ONSETS.len()], NUCLEI[(j / ONSETS.len()) % NUCLEI.len()]);
    let n = ONSETS.len() * NUCLEI.len();
    if i < n {
        syl(i)
    } else {
        format!("{}{}", syl(i % n), syl(i / n + i))
    }
}

/// One way a speaker renders a word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub tokens: Vec<usize>,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpeaker {
    pub speaker_id: String,
    /// Per lexicon word, the alternatives with probabilities summing to 1.
    pub emissions: Vec<Vec<Emission>>,
    /// Expected audio tokens per word.
    pub rate: f64,
    pub style: Option<String>,
}

impl ToySpeaker {
    pub fn is_deterministic(&self) -> bool {
        self.emissions.iter().all(|e| e.len() == 1)
    }

    fn render<R: Rng>(&self, words: &[usize], rng: &mut R) -> Vec<usize> {
        let mut out = Vec::new();
        for &w in words {
            let table = &self.emissions[w];
            let pick = if table.len() == 1 {
                0
            } else {
                WeightedIndex::new(table.iter().map(|e| e.prob))
                    .expect("normalized emission table")
                    .sample(rng)
            };
            out.extend_from_slice(&table[pick].tokens);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    pub n_speakers: usize,
    /// The last `n_heldout` speakers are held out from training.
    pub n_heldout: usize,
    pub utts_per_speaker: usize,
    pub lexicon_size: usize,
    pub audio_vocab: usize,
    /// Alternatives per word; 1 gives deterministic speakers.
    pub variants: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 13,
            n_heldout: 3,
            utts_per_speaker: 50,
            lexicon_size: 24,
            audio_vocab: 64,
            variants: 3,
            min_words: 5,
            max_words: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub speakers: Vec<ToySpeaker>,
    pub records: Vec<CorpusRecord>,
    pub train_speakers: Vec<String>,
    pub heldout_speakers: Vec<String>,
}

impl ToyCorpus {
    pub fn records_of(&self, speaker: &str) -> Vec<CorpusRecord> {
        self.records.iter().filter(|r| r.speaker_id == speaker).cloned().collect()
    }

    pub fn train_records(&self) -> Vec<CorpusRecord> {
        self.records
            .iter()
            .filter(|r| self.train_speakers.contains(&r.speaker_id))
            .cloned()
            .collect()
    }

    pub fn speaker(&self, id: &str) -> Option<&ToySpeaker> {
        self.speakers.iter().find(|s| s.speaker_id == id)
    }
}

fn make_speaker<R: Rng>(id: String, spec: &ToyCorpusSpec, rng: &mut R) -> ToySpeaker {
    let half = spec.audio_vocab / 2;
    let n_prosody = spec.audio_vocab - half;
    // Voice: three favourite prosody tokens carry most of the mass.
    let mut order: Vec<usize> = (0..n_prosody).collect();
    order.shuffle(rng);
    let mut voice = vec![0.05 / n_prosody as f64; n_prosody];
    for (slot, w) in order.iter().zip([0.6, 0.25, 0.1]) {
        voice[*slot] += w;
    }
    let voice = WeightedIndex::new(&voice).expect("positive voice weights");
    let m = rng.gen_range(1..=2usize);
    let emissions = (0..spec.lexicon_size)
        .map(|w| {
            let raw: Vec<f64> = (0..spec.variants).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter()
                .map(|p| {
                    let mut tokens = vec![w % half];
                    tokens.extend((0..m).map(|_| half + voice.sample(rng)));
                    Emission {
                        tokens,
                        prob: p / total,
                    }
                })
                .collect()
        })
        .collect();
    ToySpeaker {
        speaker_id: id,
        emissions,
        rate: (1 + m) as f64,
        style: None,
    }
}

/// Generates speakers and their utterances; byte-identical for a fixed spec.
pub fn gen_toy_corpus(spec: &ToyCorpusSpec) -> Result<ToyCorpus> {
    ensure!(
        spec.n_speakers > 0 && spec.utts_per_speaker > 0 && spec.lexicon_size > 0 && spec.variants > 0,
        "toy corpus sizes must be positive"
    );
    ensure!(spec.n_heldout < spec.n_speakers, "at least one training speaker is required");
    ensure!(spec.audio_vocab >= 4, "audio vocabulary of {} is too small", spec.audio_vocab);
    ensure!(
        1 <= spec.min_words && spec.min_words <= spec.max_words,
        "word count range {}..={} is empty",
        spec.min_words,
        spec.max_words
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_train = spec.n_speakers - spec.n_heldout;
    let ids: Vec<String> = (0..spec.n_speakers)
        .map(|i| if i < n_train { format!("s{i}") } else { format!("h{}", i - n_train) })
        .collect();
    let speakers: Vec<ToySpeaker> = ids.iter().map(|id| make_speaker(id.clone(), spec, &mut rng)).collect();
    let lexicon: Vec<String> = (0..spec.lexicon_size).map(word).collect();
    let mut records = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
    for s in &speakers {
        for _ in 0..spec.utts_per_speaker {
            let n = rng.gen_range(spec.min_words..=spec.max_words);
            let words: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.lexicon_size)).collect();
            let text = words.iter().map(|&w| lexicon[w].as_str()).collect::<Vec<_>>().join(" ");
            records.push(CorpusRecord {
                text,
                audio_ids: s.render(&words, &mut rng),
                speaker_id: s.speaker_id.clone(),
                style_id: s.style.clone(),
            });
        }
    }
    Ok(ToyCorpus {
        speakers,
        records,
        train_speakers: ids[..n_train].to_vec(),
        heldout_speakers: ids[n_train..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::corpus_to_jsonl;
    use std::collections::HashMap;

    fn small(seed: u64, variants: usize) -> ToyCorpusSpec {
        ToyCorpusSpec {
            n_speakers: 4,
            n_heldout: 1,
            utts_per_speaker: 30,
            variants,
            seed,
            ..ToyCorpusSpec::default()
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let a = corpus_to_jsonl(&gen_toy_corpus(&small(3, 3)).unwrap().records).unwrap();
        let b = corpus_to_jsonl(&gen_toy_corpus(&small(3, 3)).unwrap().records).unwrap();
        let c = corpus_to_jsonl(&gen_toy_corpus(&small(4, 3)).unwrap().records).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn speakers_are_partitioned_and_tables_normalized() {
        let c = gen_toy_corpus(&small(1, 3)).unwrap();
        assert_eq!(c.train_speakers, ["s0", "s1", "s2"]);
        assert_eq!(c.heldout_speakers, ["h0"]);
        for s in &c.speakers {
            assert_eq!(s.emissions.len(), 24);
            for t in &s.emissions {
                assert!((t.iter().map(|e| e.prob).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        for r in &c.records {
            let n_words = r.text.split(' ').count();
            assert!((5..=20).contains(&n_words));
            assert!(r.audio_ids.iter().all(|&a| a < 64));
        }
        let lex: Vec<String> = (0..300).map(word).collect();
        let mut sorted = lex.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), lex.len());
    }

    #[test]
    fn deterministic_speaker_is_a_function_of_text() {
        let c = gen_toy_corpus(&small(2, 1)).unwrap();
        let mut seen: HashMap<(String, String), Vec<usize>> = HashMap::new();
        for r in &c.records {
            let key = (r.speaker_id.clone(), r.text.clone());
            if let Some(prev) = seen.insert(key, r.audio_ids.clone()) {
                assert_eq!(prev, r.audio_ids);
            }
        }
        assert!(c.speakers.iter().all(ToySpeaker::is_deterministic));
        // Same words, same audio, within one speaker.
        let s = &c.speakers[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(s.render(&[3, 1, 3], &mut rng), s.render(&[3, 1, 3], &mut rng));
    }

    #[test]
    fn emission_frequencies_match_tables() {
        let spec = ToyCorpusSpec {
            n_speakers: 1,
            n_heldout: 0,
            utts_per_speaker: 2000,
            lexicon_size: 4,
            ..ToyCorpusSpec::default()
        };
        let c = gen_toy_corpus(&spec).unwrap();
        let s = &c.speakers[0];
        let width = s.rate as usize;
        let lex: Vec<String> = (0..4).map(word).collect();
        let mut counts: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
        let mut totals = [0usize; 4];
        for r in &c.records {
            for (i, w) in r.text.split(' ').enumerate() {
                let wi = lex.iter().position(|l| l == w).unwrap();
                let gram = r.audio_ids[i * width..(i + 1) * width].to_vec();
                *counts.entry((wi, gram)).or_default() += 1;
                totals[wi] += 1;
            }
        }
        for (wi, table) in s.emissions.iter().enumerate() {
            let mut probs: HashMap<Vec<usize>, f64> = HashMap::new();
            for e in table {
                *probs.entry(e.tokens.clone()).or_default() += e.prob;
            }
            for (gram, p) in probs {
                let n = totals[wi] as f64;
                let got = *counts.get(&(wi, gram)).unwrap_or(&0) as f64;
                let sigma = (n * p * (1.0 - p)).sqrt().max(1e-9);
                assert!((got - n * p).abs() <= 3.0 * sigma, "word {wi}: {got} vs {}", n * p);
            }
        }
    }
}
