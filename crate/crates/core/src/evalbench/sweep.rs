//! Sweep harness: one row per grid point, every row evaluated on the same
//! episode set (with the row's corruption or filter applied to the query
//! clip), rows carrying full metadata for reproduction. Failures are
//! recorded per row so a partial table still comes out.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::episodes::Episode;
use crate::error::Result;
use crate::msdecode::ScheduleKind;
use crate::scalar::Scalar;

use super::corrupt::{corrupt, NoiseKind};
use super::freq::{frequency_filter, FreqFilter};

/// Metadata and input transform for one sweep row.
#[derive(Clone, Debug)]
pub struct RowSpec {
    /// Human-readable grid-point label.
    pub label: String,
    /// Model variant the row evaluates (e.g. "memory-multigrid").
    pub variant: String,
    pub corruption: Option<(NoiseKind, f64)>,
    pub filter: Option<FreqFilter>,
    pub schedule: Option<ScheduleKind>,
    pub n_mem: Option<usize>,
    /// Seed for the row's stochastic corruption.
    pub seed: u64,
}

impl RowSpec {
    pub fn clean(variant: &str) -> Self {
        RowSpec {
            label: "clean".into(),
            variant: variant.into(),
            corruption: None,
            filter: None,
            schedule: None,
            n_mem: None,
            seed: 0,
        }
    }
}

/// Per-episode metric record.
#[derive(Clone, Debug)]
pub struct EpisodeMetrics {
    pub episode_seed: u64,
    pub class_id: usize,
    pub fold: usize,
    pub j: f64,
    pub f: f64,
    pub sr: Option<Vec<f64>>,
}

/// One grid point: per-episode metrics plus aggregates.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub spec: RowSpec,
    pub episodes: Vec<EpisodeMetrics>,
    /// (fold, mean J, mean F) per fold present in the episode set.
    pub fold_means: Vec<(usize, f64, f64)>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    pub sr_mean: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub rows: Vec<SweepRow>,
}

/// Applies a row's input transform to an episode's query clip.
pub fn transform_episode<T: Scalar>(spec: &RowSpec, episode: &Episode<T>) -> Result<Episode<T>> {
    let mut out = episode.clone();
    if let Some((kind, magnitude)) = spec.corruption {
        out.query = corrupt(
            &out.query,
            kind,
            magnitude,
            crate::rng::derive_seed(spec.seed, "row-noise", episode.seed),
        )?;
    }
    if let Some(filter) = spec.filter {
        out.query = frequency_filter(&out.query, filter)?;
    }
    Ok(out)
}

/// Runs every row over the shared episode set. `eval` sees the transformed
/// episode and returns its metrics; a row-level error aborts only that row.
pub fn run_sweep<T: Scalar>(
    rows: &[RowSpec],
    episodes: &[(usize, Episode<T>)],
    mut eval: impl FnMut(&RowSpec, &Episode<T>) -> Result<EpisodeMetrics>,
) -> MetricReport {
    let mut report = MetricReport::default();
    for spec in rows {
        let mut row = SweepRow {
            spec: spec.clone(),
            episodes: Vec::with_capacity(episodes.len()),
            fold_means: Vec::new(),
            j_mean: 0.0,
            f_mean: 0.0,
            jf_mean: 0.0,
            sr_mean: None,
            error: None,
        };
        'episodes: for (fold, ep) in episodes {
            let transformed = match transform_episode(spec, ep) {
                Ok(t) => t,
                Err(e) => {
                    row.error = Some(format!("{e}"));
                    break 'episodes;
                }
            };
            match eval(spec, &transformed) {
                Ok(mut m) => {
                    m.fold = *fold;
                    m.episode_seed = ep.seed;
                    m.class_id = ep.class_id;
                    row.episodes.push(m);
                }
                Err(e) => {
                    row.error = Some(format!("{e}"));
                    break 'episodes;
                }
            }
        }
        finalize_row(&mut row);
        report.rows.push(row);
    }
    report
}

fn finalize_row(row: &mut SweepRow) {
    if row.episodes.is_empty() {
        return;
    }
    let n = row.episodes.len() as f64;
    row.j_mean = row.episodes.iter().map(|e| e.j).sum::<f64>() / n;
    row.f_mean = row.episodes.iter().map(|e| e.f).sum::<f64>() / n;
    row.jf_mean = 0.5 * (row.j_mean + row.f_mean);
    let mut folds: Vec<usize> = row.episodes.iter().map(|e| e.fold).collect();
    folds.sort_unstable();
    folds.dedup();
    row.fold_means = folds
        .into_iter()
        .map(|f| {
            let eps: Vec<&EpisodeMetrics> =
                row.episodes.iter().filter(|e| e.fold == f).collect();
            let m = eps.len() as f64;
            (
                f,
                eps.iter().map(|e| e.j).sum::<f64>() / m,
                eps.iter().map(|e| e.f).sum::<f64>() / m,
            )
        })
        .collect();
    let srs: Vec<f64> = row
        .episodes
        .iter()
        .filter_map(|e| {
            e.sr.as_ref()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    if srs.len() == row.episodes.len() {
        row.sr_mean = Some(srs.iter().sum::<f64>() / srs.len() as f64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{make_folds, sample_episode, Phase};

    fn episodes() -> Vec<(usize, Episode<f64>)> {
        let folds = make_folds(8, 4, 1).unwrap();
        (0..4)
            .map(|i| {
                (
                    i % 2 + 1,
                    sample_episode::<f64>(&folds[i % 2], Phase::MetaTest, 1, 1, 32, 32, i as u64)
                        .unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn zero_magnitude_rows_see_bit_identical_queries() {
        let eps = episodes();
        let clean = RowSpec::clean("m");
        let zero_noise = RowSpec {
            label: "gaussian@0".into(),
            corruption: Some((NoiseKind::Gaussian, 0.0)),
            ..RowSpec::clean("m")
        };
        for (_, ep) in &eps {
            let a = transform_episode(&clean, ep).unwrap();
            let b = transform_episode(&zero_noise, ep).unwrap();
            assert!(a.query.bits_eq(&b.query));
        }
    }

    #[test]
    fn rows_share_episode_ids_and_aggregate_means() {
        let eps = episodes();
        let rows = [RowSpec::clean("a"), RowSpec {
            label: "gaussian@0.1".into(),
            corruption: Some((NoiseKind::Gaussian, 0.1)),
            seed: 3,
            ..RowSpec::clean("a")
        }];
        let report = run_sweep(&rows, &eps, |_, ep| {
            Ok(EpisodeMetrics {
                episode_seed: ep.seed,
                class_id: ep.class_id,
                fold: 0,
                j: 0.5,
                f: 0.25,
                sr: None,
            })
        });
        assert_eq!(report.rows.len(), 2);
        let ids: Vec<Vec<u64>> = report
            .rows
            .iter()
            .map(|r| r.episodes.iter().map(|e| e.episode_seed).collect())
            .collect();
        assert_eq!(ids[0], ids[1], "paired rows must share episode ids");
        for row in &report.rows {
            assert_eq!(row.j_mean, 0.5);
            assert_eq!(row.f_mean, 0.25);
            assert_eq!(row.jf_mean, 0.375);
            assert_eq!(row.fold_means.len(), 2);
            assert!(row.error.is_none());
        }
    }

    #[test]
    fn row_errors_leave_a_partial_table() {
        let eps = episodes();
        let rows = [RowSpec::clean("ok"), RowSpec::clean("boom")];
        let report = run_sweep(&rows, &eps, |spec, ep| {
            if spec.variant == "boom" {
                return Err(crate::Error::Eval("injected".into()));
            }
            Ok(EpisodeMetrics {
                episode_seed: ep.seed,
                class_id: ep.class_id,
                fold: 0,
                j: 1.0,
                f: 1.0,
                sr: None,
            })
        });
        assert!(report.rows[0].error.is_none());
        assert_eq!(report.rows[0].episodes.len(), 4);
        assert!(report.rows[1].error.is_some());
    }
}
