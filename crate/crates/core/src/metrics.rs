//! Retrieval evaluation: distance matrices, CMC and mAP.
//!
//! Protocol: for each query, gallery items sharing both its object id and
//! its camera are dropped; the rest are ranked by ascending squared
//! Euclidean distance with ties broken by gallery index. A query with no
//! remaining match is skipped and counted.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::sq_dist_matrix;
use crate::error::{shape_err, ReidError, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    pub object_id: usize,
    pub camera_id: usize,
}

#[derive(Clone, Debug)]
pub struct EvalSet {
    pub query: Tensor,
    pub query_labels: Vec<Label>,
    pub gallery: Tensor,
    pub gallery_labels: Vec<Label>,
}

impl EvalSet {
    pub fn validate(&self) -> Result<()> {
        let (q, g) = (self.query.shape(), self.gallery.shape());
        if q.len() != 2 || g.len() != 2 || q[1] != g[1] {
            return Err(shape_err("evaluate", q, g));
        }
        if q[0] != self.query_labels.len() || g[0] != self.gallery_labels.len() {
            return Err(shape_err(
                "evaluate",
                &[q[0], g[0]],
                &[self.query_labels.len(), self.gallery_labels.len()],
            ));
        }
        Ok(())
    }
}

/// Squared Euclidean distances between query and gallery rows.
pub fn pairwise_distances(q: &Tensor, g: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || g.rank() != 2 || q.shape()[1] != g.shape()[1] {
        return Err(shape_err("pairwise_distances", q.shape(), g.shape()));
    }
    Ok(sq_dist_matrix(q, g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    /// Non-excluded gallery indices in ranked order.
    pub ranked: Vec<usize>,
    pub distances: Vec<f64>,
    pub matches: Vec<bool>,
    pub valid: bool,
}

impl RankingResult {
    pub fn average_precision(&self) -> f64 {
        average_precision(&self.matches)
    }

    /// 1-based rank of the first match.
    pub fn first_match(&self) -> Option<usize> {
        self.matches.iter().position(|&m| m).map(|p| p + 1)
    }
}

/// Mean of precision@rank over the relevant ranks; zero with no relevant item.
pub fn average_precision(matches: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (i, &m) in matches.iter().enumerate() {
        if m {
            hits += 1;
            acc += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        acc / hits as f64
    }
}

pub fn rank_query(dist_row: &[f64], query: Label, gallery: &[Label]) -> RankingResult {
    let mut ranked: Vec<usize> = (0..gallery.len())
        .filter(|&j| {
            !(gallery[j].object_id == query.object_id && gallery[j].camera_id == query.camera_id)
        })
        .collect();
    ranked.sort_by(|&a, &b| dist_row[a].total_cmp(&dist_row[b]).then(a.cmp(&b)));
    let matches: Vec<bool> = ranked
        .iter()
        .map(|&j| gallery[j].object_id == query.object_id)
        .collect();
    RankingResult {
        distances: ranked.iter().map(|&j| dist_row[j]).collect(),
        valid: matches.iter().any(|&m| m),
        ranked,
        matches,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// CMC at ranks `1..=cmc.len()`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
    pub num_valid: usize,
    pub skipped: usize,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k.min(self.cmc.len())).max(1) - 1]
    }
}

pub struct Evaluation {
    pub report: EvalReport,
    pub rankings: Vec<RankingResult>,
}

/// Cross-camera single-query CMC (ranks `1..=max_rank`) and mAP.
pub fn evaluate(set: &EvalSet, max_rank: usize) -> Result<Evaluation> {
    set.validate()?;
    let dist = pairwise_distances(&set.query, &set.gallery)?;
    let nq = set.query_labels.len();
    let rankings = par::map_range(nq, nq >= 64, |i| {
        rank_query(dist.row(i), set.query_labels[i], &set.gallery_labels)
    });
    Ok(Evaluation {
        report: summarize(&rankings, max_rank),
        rankings,
    })
}

pub fn summarize(rankings: &[RankingResult], max_rank: usize) -> EvalReport {
    let max_rank = max_rank.max(1);
    let mut hits = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    for r in rankings.iter().filter(|r| r.valid) {
        valid += 1;
        ap_sum += r.average_precision();
        if let Some(first) = r.first_match() {
            for h in hits.iter_mut().skip(first - 1) {
                *h += 1;
            }
        }
    }
    let denom = valid.max(1) as f64;
    EvalReport {
        cmc: hits.iter().map(|&h| h as f64 / denom).collect(),
        map: ap_sum / denom,
        num_queries: rankings.len(),
        num_valid: valid,
        skipped: rankings.len() - valid,
    }
}

/// Writes `rank,cmc` rows and a final `mAP,<value>` row; optionally an SVG plot
/// next to it with the same stem.
pub fn export_curves(report: &EvalReport, path: &Path, svg: bool) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "rank,cmc")?;
    for (i, c) in report.cmc.iter().enumerate() {
        writeln!(f, "{},{}", i + 1, c)?;
    }
    writeln!(f, "mAP,{}", report.map)?;
    f.flush()?;
    if svg {
        std::fs::write(path.with_extension("svg"), render_svg(report))?;
    }
    Ok(())
}

/// Reads back `(cmc, mAP)` from [`export_curves`] output.
pub fn read_curves(path: &Path) -> Result<(Vec<f64>, f64)> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let bad = |m: &str| ReidError::Format(format!("{}: {m}", path.display()));
    if lines.next().transpose()?.as_deref() != Some("rank,cmc") {
        return Err(bad("missing rank,cmc header"));
    }
    let mut cmc = Vec::new();
    for line in lines {
        let line = line?;
        let (k, v) = line.split_once(',').ok_or_else(|| bad("malformed row"))?;
        let v: f64 = v.parse().map_err(|_| bad("bad value"))?;
        if k == "mAP" {
            return Ok((cmc, v));
        }
        let rank: usize = k.parse().map_err(|_| bad("bad rank"))?;
        if rank != cmc.len() + 1 {
            return Err(bad("ranks must be 1..K"));
        }
        cmc.push(v);
    }
    Err(bad("missing mAP row"))
}

fn render_svg(report: &EvalReport) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let k = report.cmc.len().max(2) as f64;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (k - 1.0);
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v;
    let mut pts = String::new();
    for (i, &c) in report.cmc.iter().enumerate() {
        let _ = write!(pts, "{:.2},{:.2} ", x(i), y(c));
    }
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            "<line x1=\"{p}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<line x1=\"{p}\" y1=\"{p}\" x2=\"{p}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{pts}\"/>\n",
            "<line x1=\"{p}\" y1=\"{my:.2}\" x2=\"{r}\" y2=\"{my:.2}\" stroke=\"orange\" stroke-dasharray=\"4\"/>\n",
            "<text x=\"{p}\" y=\"20\" font-size=\"12\">CMC (blue), mAP = {map:.4} (orange)</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        p = pad,
        b = h - pad,
        r = w - pad,
        pts = pts.trim_end(),
        my = y(report.map),
        map = report.map,
    )
}

/// Mean and standard deviation of a metric over random permutations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChanceEstimate {
    pub rank1_mean: f64,
    pub rank1_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
    pub trials: usize,
}

/// Re-evaluates `set` with object ids randomly permuted over images (cameras
/// kept) to estimate chance-level scores. A query row identical to a
/// same-camera gallery row is the same image and keeps sharing its label.
pub fn label_shuffle_chance<R: rand::Rng>(
    set: &EvalSet,
    trials: usize,
    rng: &mut R,
) -> Result<ChanceEstimate> {
    use rand::seq::SliceRandom;
    set.validate()?;
    let dist = pairwise_distances(&set.query, &set.gallery)?;
    let ng = set.gallery_labels.len();
    // pool slot of every query: its gallery twin, or a slot of its own
    let mut pool: Vec<usize> = set.gallery_labels.iter().map(|l| l.object_id).collect();
    let slots: Vec<usize> = (0..set.query_labels.len())
        .map(|i| {
            let twin = (0..ng).find(|&j| {
                set.gallery_labels[j].camera_id == set.query_labels[i].camera_id
                    && set.query.row(i) == set.gallery.row(j)
            });
            twin.unwrap_or_else(|| {
                pool.push(set.query_labels[i].object_id);
                pool.len() - 1
            })
        })
        .collect();
    let (mut r1, mut ap) = (Vec::with_capacity(trials), Vec::with_capacity(trials));
    for _ in 0..trials {
        pool.shuffle(rng);
        let relabel = |l: &Label, slot: usize| Label {
            object_id: pool[slot],
            camera_id: l.camera_id,
        };
        let gallery: Vec<Label> = set
            .gallery_labels
            .iter()
            .enumerate()
            .map(|(j, l)| relabel(l, j))
            .collect();
        let rankings: Vec<RankingResult> = (0..set.query_labels.len())
            .map(|i| {
                rank_query(
                    dist.row(i),
                    relabel(&set.query_labels[i], slots[i]),
                    &gallery,
                )
            })
            .collect();
        let rep = summarize(&rankings, 1);
        r1.push(rep.rank(1));
        ap.push(rep.map);
    }
    let stats = |v: &[f64]| {
        let n = v.len().max(1) as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
        (m, var.sqrt())
    };
    let (rank1_mean, rank1_std) = stats(&r1);
    let (map_mean, map_std) = stats(&ap);
    Ok(ChanceEstimate {
        rank1_mean,
        rank1_std,
        map_mean,
        map_std,
        trials,
    })
}
