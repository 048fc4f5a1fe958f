//! Extreme-classification datasets.
//!
//! Text format: a header line `num_points num_features num_labels`, then one
//! line per example of the form `l1,l2,... f1:v1 f2:v2 ...`.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DataError, Result};
use crate::sparse::SparseVector;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Sorted, distinct, nonempty.
    pub labels: Vec<u32>,
    pub features: SparseVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct XcDataset {
    pub num_features: usize,
    pub num_labels: usize,
    pub examples: Vec<Example>,
}

impl XcDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Splits off the examples from `at` onwards.
    pub fn split_at(mut self, at: usize) -> (XcDataset, XcDataset) {
        let tail = self.examples.split_off(at.min(self.examples.len()));
        let rest = XcDataset {
            num_features: self.num_features,
            num_labels: self.num_labels,
            examples: tail,
        };
        (self, rest)
    }

    /// Writes the dataset in the text format read by [`parse_xc`].
    pub fn write_xc<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{} {} {}", self.examples.len(), self.num_features, self.num_labels)?;
        for ex in &self.examples {
            let mut first = true;
            for l in &ex.labels {
                if !first {
                    w.write_all(b",")?;
                }
                write!(w, "{l}")?;
                first = false;
            }
            for (i, v) in ex.features.iter() {
                // `{:?}` prints the shortest string that parses back exactly.
                write!(w, " {i}:{v:?}")?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_xc_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_xc(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii output")
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> DataError {
    DataError::Syntax { line, msg: msg.into() }
}

fn parse_header(line: &str) -> Result<(usize, usize, usize), DataError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(DataError::MalformedHeader(format!("expected 3 integers, got `{line}`")));
    }
    let mut vals = [0usize; 3];
    for (v, f) in vals.iter_mut().zip(&fields) {
        *v = f
            .parse()
            .map_err(|_| DataError::MalformedHeader(format!("`{f}` is not a non-negative integer")))?;
    }
    if vals[1] == 0 || vals[2] == 0 {
        return Err(DataError::MalformedHeader("feature and label counts must be positive".into()));
    }
    Ok((vals[0], vals[1], vals[2]))
}

fn parse_example(
    text: &str,
    line: usize,
    num_features: usize,
    num_labels: usize,
    index_base: u32,
) -> Result<Example, DataError> {
    let mut tokens = text.split_ascii_whitespace().peekable();
    let mut labels = Vec::new();
    // A line may start directly with a feature when it has no labels.
    if let Some(first) = tokens.peek() {
        if !first.contains(':') {
            let first = tokens.next().expect("peeked");
            for tok in first.split(',').filter(|t| !t.is_empty()) {
                let raw: u64 = tok.parse().map_err(|_| syntax(line, format!("bad label `{tok}`")))?;
                let id = raw
                    .checked_sub(index_base as u64)
                    .ok_or_else(|| syntax(line, format!("label {raw} below index base {index_base}")))?;
                if id >= num_labels as u64 {
                    return Err(DataError::LabelOutOfRange {
                        line,
                        label: raw,
                        num_labels,
                    });
                }
                labels.push(id as u32);
            }
        }
    }
    if labels.is_empty() {
        return Err(DataError::EmptyLabelSet { line });
    }
    labels.sort_unstable();
    labels.dedup();

    let mut pairs: Vec<(u32, f64)> = Vec::new();
    for tok in tokens {
        let (f, v) = tok
            .split_once(':')
            .ok_or_else(|| syntax(line, format!("expected index:value, got `{tok}`")))?;
        let raw: u64 = f.parse().map_err(|_| syntax(line, format!("bad feature index `{f}`")))?;
        let value: f64 = v.parse().map_err(|_| syntax(line, format!("bad feature value `{v}`")))?;
        if !value.is_finite() {
            return Err(syntax(line, format!("non-finite feature value `{v}`")));
        }
        let idx = raw
            .checked_sub(index_base as u64)
            .ok_or_else(|| syntax(line, format!("feature {raw} below index base {index_base}")))?;
        if idx >= num_features as u64 {
            return Err(DataError::FeatureOutOfRange {
                line,
                feature: raw,
                num_features,
            });
        }
        pairs.push((idx as u32, value));
    }
    pairs.sort_by_key(|&(i, _)| i);
    if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(syntax(line, "duplicate feature index"));
    }
    let (indices, values) = pairs.into_iter().unzip();
    Ok(Example {
        labels,
        features: SparseVector::from_parts_unchecked(num_features, indices, values),
    })
}

/// Reads a dataset in one pass. `index_base` is subtracted from every label
/// and feature id (0 for 0-based files, 1 for 1-based ones). Lines may end in
/// LF or CRLF; blank lines are skipped.
pub fn parse_xc<R: BufRead>(reader: R, index_base: u32) -> Result<XcDataset> {
    let mut lines = reader.lines().enumerate();
    let (num_points, num_features, num_labels) = loop {
        match lines.next() {
            None => return Err(DataError::MalformedHeader("empty input".into()).into()),
            Some((_, line)) => {
                let line = line?;
                let line = line.trim_end_matches('\r');
                if line.trim().is_empty() {
                    continue;
                }
                break parse_header(line)?;
            }
        }
    };
    let mut examples = Vec::with_capacity(num_points.min(1 << 20));
    let mut surplus = 0usize;
    for (i, line) in lines {
        let line = line?;
        let text = line.trim_end_matches('\r');
        if text.trim().is_empty() {
            continue;
        }
        if examples.len() == num_points {
            surplus += 1;
            continue;
        }
        examples.push(parse_example(text, i + 1, num_features, num_labels, index_base)?);
    }
    if examples.len() != num_points || surplus > 0 {
        return Err(DataError::CountMismatch {
            expected: num_points,
            found: examples.len() + surplus,
        }
        .into());
    }
    Ok(XcDataset {
        num_features,
        num_labels,
        examples,
    })
}

pub fn parse_xc_str(text: &str, index_base: u32) -> Result<XcDataset> {
    parse_xc(text.as_bytes(), index_base)
}

/// Number of stored coordinates kept per synthetic example.
pub const SYNTH_NNZ: usize = 32;

/// Clustered classification task: class `c` has a random unit direction
/// `mu_c`; each sample is `mu_c` plus isotropic Gaussian noise of expected
/// norm `sigma` (per-coordinate standard deviation `sigma / sqrt(feature_dim)`),
/// keeping the 32 largest-magnitude coordinates.
///
/// Examples are emitted round by round (one sample of every class per round),
/// so `split_at(k * num_classes)` holds out whole rounds.
pub fn synth_clustered(
    num_classes: usize,
    samples_per_class: usize,
    feature_dim: usize,
    sigma: f64,
    seed: u64,
) -> XcDataset {
    assert!(num_classes > 0 && feature_dim > 0, "need at least one class and one feature");
    assert!(sigma >= 0.0, "sigma must be non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect();
    let noise_sd = sigma / (feature_dim as f64).sqrt();
    let keep = SYNTH_NNZ.min(feature_dim);
    let mut examples = Vec::with_capacity(num_classes * samples_per_class);
    let mut point = vec![0.0; feature_dim];
    let mut order: Vec<u32> = (0..feature_dim as u32).collect();
    for _ in 0..samples_per_class {
        for (c, mu) in centers.iter().enumerate() {
            for (p, &m) in point.iter_mut().zip(mu) {
                let noise: f64 = if noise_sd > 0.0 { noise_sd * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                *p = m + noise;
            }
            let by_magnitude = |a: &u32, b: &u32| {
                point[*b as usize]
                    .abs()
                    .total_cmp(&point[*a as usize].abs())
                    .then(a.cmp(b))
            };
            if keep < feature_dim {
                order.select_nth_unstable_by(keep - 1, by_magnitude);
            }
            let mut idx: Vec<u32> = order[..keep].to_vec();
            idx.sort_unstable();
            let vals = idx.iter().map(|&i| point[i as usize]).collect();
            examples.push(Example {
                labels: vec![c as u32],
                features: SparseVector::from_parts_unchecked(feature_dim, idx, vals),
            });
        }
    }
    XcDataset {
        num_features: feature_dim,
        num_labels: num_classes,
        examples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn data_err(r: Result<XcDataset>) -> DataError {
        match r {
            Err(Error::Data(e)) => e,
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn parses_small_file() {
        let ds = parse_xc_str("2 3 4\n0,2 1:0.5\n3 0:1.0 2:2.0\n", 0).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.examples[0].labels, vec![0, 2]);
        assert_eq!(ds.examples[0].features, SparseVector::new(3, vec![1], vec![0.5]).unwrap());
        assert_eq!(ds.examples[1].labels, vec![3]);
        assert_eq!(ds.examples[1].features.values(), &[1.0, 2.0]);
    }

    #[test]
    fn crlf_matches_lf() {
        let lf = parse_xc_str("2 3 4\n0,2 1:0.5\n3 0:1.0 2:2.0\n", 0).unwrap();
        let crlf = parse_xc_str("2 3 4\r\n0,2 1:0.5\r\n3 0:1.0 2:2.0\r\n", 0).unwrap();
        assert_eq!(lf, crlf);
    }

    #[test]
    fn sorts_unsorted_features() {
        let ds = parse_xc_str("1 5 2\n1 4:1 0:2 2:3\n", 0).unwrap();
        assert_eq!(ds.examples[0].features.indices(), &[0, 2, 4]);
        assert_eq!(ds.examples[0].features.values(), &[2.0, 3.0, 1.0]);
    }

    #[test]
    fn one_based_ids() {
        let ds = parse_xc_str("1 3 4\n4,1 3:1.5\n", 1).unwrap();
        assert_eq!(ds.examples[0].labels, vec![0, 3]);
        assert_eq!(ds.examples[0].features.indices(), &[2]);
        assert!(matches!(data_err(parse_xc_str("1 3 4\n0 1:1\n", 1)), DataError::Syntax { .. }));
    }

    #[test]
    fn count_mismatch() {
        let e = data_err(parse_xc_str("1 3 4\n0 1:1\n1 2:1\n", 0));
        assert!(matches!(e, DataError::CountMismatch { expected: 1, found: 2 }));
        let e = data_err(parse_xc_str("3 3 4\n0 1:1\n", 0));
        assert!(matches!(e, DataError::CountMismatch { expected: 3, found: 1 }));
    }

    #[test]
    fn range_errors() {
        let e = data_err(parse_xc_str("1 3 4\n5 0:1.0\n", 0));
        assert!(matches!(e, DataError::LabelOutOfRange { line: 2, label: 5, .. }));
        let e = data_err(parse_xc_str("1 3 4\n1 3:1.0\n", 0));
        assert!(matches!(e, DataError::FeatureOutOfRange { line: 2, feature: 3, .. }));
        let e = data_err(parse_xc_str("1 3 4\n0:1.0\n", 0));
        assert!(matches!(e, DataError::EmptyLabelSet { line: 2 }));
    }

    #[test]
    fn header_errors() {
        for bad in ["", "1 2\n", "a b c\n", "1 0 4\n", "1 2 3 4\n"] {
            assert!(matches!(data_err(parse_xc_str(bad, 0)), DataError::MalformedHeader(_)), "{bad:?}");
        }
    }

    #[test]
    fn synth_noise_free_classes_are_identical() {
        let ds = synth_clustered(5, 3, 64, 0.0, 1);
        assert_eq!(ds.len(), 15);
        for c in 0..5 {
            let first = &ds.examples[c].features;
            assert_eq!(first.nnz(), SYNTH_NNZ);
            for r in 1..3 {
                let ex = &ds.examples[r * 5 + c];
                assert_eq!(ex.labels, vec![c as u32]);
                assert_eq!(&ex.features, first);
            }
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_clustered(20, 2, 100, 0.1, 7).to_xc_string();
        let b = synth_clustered(20, 2, 100, 0.1, 7).to_xc_string();
        assert_eq!(a, b);
        assert_ne!(a, synth_clustered(20, 2, 100, 0.1, 8).to_xc_string());
    }

    #[test]
    fn synth_round_trips_through_text() {
        let ds = synth_clustered(30, 2, 50, 0.3, 3);
        assert_eq!(parse_xc_str(&ds.to_xc_string(), 0).unwrap(), ds);
    }

    fn dataset_strategy() -> impl Strategy<Value = XcDataset> {
        (1usize..40, 1usize..20).prop_flat_map(|(nf, nl)| {
            let example = (
                prop::collection::btree_set(0..nl as u32, 1..4),
                prop::collection::btree_map(0..nf as u32, -1e6f64..1e6, 0..8),
            )
                .prop_map(move |(labels, feats)| Example {
                    labels: labels.into_iter().collect(),
                    features: SparseVector::from_pairs(nf, feats.into_iter().collect()).unwrap(),
                });
            prop::collection::vec(example, 0..10).prop_map(move |examples| XcDataset {
                num_features: nf,
                num_labels: nl,
                examples,
            })
        })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(ds in dataset_strategy()) {
            prop_assert_eq!(parse_xc_str(&ds.to_xc_string(), 0).unwrap(), ds);
        }
    }
}
