//! Score fusion, λ calibration and face-level ROC evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::imagecore::{Label, SpliceManifest};

/// Default balance factor when no validation set is available.
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

pub const REPORT_HEADER: &str = "face_id,label,F,Sbar,Nq,fused";
pub const SCORES_HEADER: &str = "image,face_index,F,Sbar,Nq";

#[derive(thiserror::Error, Debug)]
pub enum EvalError {
    #[error("both classes are required (positives {pos}, negatives {neg})")]
    SingleClass { pos: usize, neg: usize },
    #[error("scores and labels differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("empty lambda grid")]
    EmptyGrid,
    #[error("lambda must be >= 0, got {0}")]
    NegativeLambda(f64),
    #[error("missing {stream} scores for {} face(s): {}", .faces.len(), .faces.join(", "))]
    MissingScores { stream: &'static str, faces: Vec<String> },
    #[error("lambda is {0} but no patch-stream scores were supplied")]
    NoPatchStream(f64),
    #[error("no appearance or patch-stream scores were supplied")]
    NoStreams,
    #[error("score table {path}: {reason}")]
    Table { path: PathBuf, reason: String },
}

/// `F + λ·S̄`.
pub fn fuse(f: f64, sbar: f64, lambda: f64) -> f64 {
    f + lambda * sbar
}

/// Face identity: image path as written in the manifest plus face index.
pub type FaceKey = (String, usize);

pub fn face_key(image: &Path, index: usize) -> FaceKey {
    (image.to_string_lossy().into_owned(), index)
}

pub fn face_id(key: &FaceKey) -> String {
    format!("{}#{}", key.0, key.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceScore {
    pub key: FaceKey,
    pub tampered: bool,
    pub f: Option<f64>,
    pub sbar: Option<f64>,
    pub n_q: Option<usize>,
    pub fused: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// From `(0,0)` at threshold +∞ down to `(1,1)` at the lowest score.
    pub points: Vec<RocPoint>,
    /// Mann–Whitney AUC with ties counted ½.
    pub auc: f64,
}

impl RocCurve {
    pub fn trapezoid_auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|p| (p[1].fpr - p[0].fpr) * (p[0].tpr + p[1].tpr) / 2.0)
            .sum()
    }
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length(scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(i));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass { pos, neg });
    }
    Ok((pos, neg))
}

fn sorted_by_score(scores: &[f64], labels: &[bool]) -> Vec<(f64, bool)> {
    let mut v: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// Rank-statistic AUC: `P(score⁺ > score⁻) + ½ P(score⁺ = score⁻)`.
pub fn auc_rank(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let v = sorted_by_score(scores, labels);
    // twice the U statistic, accumulated exactly in integers
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            j += 1;
        }
        let tie_pos = v[i..j].iter().filter(|x| x.1).count() as u128;
        let tie_neg = (j - i) as u128 - tie_pos;
        twice_u += tie_pos * (2 * neg_below + tie_neg);
        neg_below += tie_neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// ROC by a threshold sweep over the distinct scores, predicting positive
/// when `score >= threshold`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve, EvalError> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut v = sorted_by_score(scores, labels);
    v.reverse();
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < v.len() {
        let t = v[i].0;
        while i < v.len() && v[i].0 == t {
            if v[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve {
        points,
        auc: auc_rank(scores, labels)?,
    })
}

/// Grid value maximizing validation AUC of `F + λ·S̄`; ties go to the
/// smallest λ.
pub fn calibrate_lambda(f: &[f64], sbar: &[f64], labels: &[bool], grid: &[f64]) -> Result<f64, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    if let Some(&l) = grid.iter().find(|&&l| !(l >= 0.0)) {
        return Err(EvalError::NegativeLambda(l));
    }
    if f.len() != sbar.len() {
        return Err(EvalError::Length(f.len(), sbar.len()));
    }
    let mut sorted: Vec<f64> = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    for &l in &sorted {
        let fused: Vec<f64> = f.iter().zip(sbar).map(|(&a, &b)| fuse(a, b, l)).collect();
        let auc = auc_rank(&fused, labels)?;
        if auc > best.0 {
            best = (auc, l);
        }
    }
    Ok(best.1)
}

/// Per-face stream scores as produced by detection or supplied externally.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StreamScores {
    pub f: Option<f64>,
    pub sbar: Option<f64>,
    pub n_q: Option<usize>,
}

pub type ScoreTable = BTreeMap<FaceKey, StreamScores>;

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with header `image,face_index,F,Sbar,Nq`; absent values are empty.
pub fn write_score_table(table: &ScoreTable) -> String {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for ((img, idx), s) in table {
        w.write_record([
            img.clone(),
            idx.to_string(),
            fmt_opt(s.f),
            fmt_opt(s.sbar),
            fmt_opt(s.n_q),
        ])
        .expect("in-memory csv");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8"));
    out
}

pub fn read_score_table(text: &str, path: &Path) -> Result<ScoreTable, EvalError> {
    let bad = |reason: String| EvalError::Table {
        path: path.into(),
        reason,
    };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != SCORES_HEADER {
        return Err(bad(format!("expected header {SCORES_HEADER:?}")));
    }
    let mut table = ScoreTable::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row = line + 2;
        let num = |k: usize| -> Result<Option<f64>, EvalError> {
            let s = rec.get(k).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            let v: f64 = s.parse().map_err(|_| bad(format!("row {row}: bad number {s:?}")))?;
            if !v.is_finite() {
                return Err(bad(format!("row {row}: non-finite score")));
            }
            Ok(Some(v))
        };
        let idx: usize = rec
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| bad(format!("row {row}: bad face index")))?;
        let nq = match rec.get(4).unwrap_or("").trim() {
            "" => None,
            s => Some(s.parse().map_err(|_| bad(format!("row {row}: bad Nq {s:?}")))?),
        };
        let key = (rec.get(0).unwrap_or("").to_string(), idx);
        let s = StreamScores {
            f: num(2)?,
            sbar: num(3)?,
            n_q: nq,
        };
        if table.insert(key.clone(), s).is_some() {
            return Err(bad(format!("row {row}: duplicate face {}", face_id(&key))));
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<FaceScore>,
    pub roc: RocCurve,
    pub lambda: f64,
}

impl Report {
    pub fn auc(&self) -> f64 {
        self.roc.auc
    }

    /// CSV with header `face_id,label,F,Sbar,Nq,fused`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_HEADER.split(',')).expect("in-memory csv");
        for r in &self.rows {
            w.write_record([
                face_id(&r.key),
                (r.tampered as u8).to_string(),
                fmt_opt(r.f),
                fmt_opt(r.sbar),
                fmt_opt(r.n_q),
                r.fused.to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    /// Lines `threshold,fpr,tpr` followed by `# auc=<value>`.
    pub fn roc_text(&self) -> String {
        roc_text(&self.roc)
    }
}

pub fn roc_text(roc: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &roc.points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    let _ = writeln!(out, "# auc={:.3}", roc.auc);
    out
}

/// Joins manifest faces with stream scores, fuses them and computes the
/// face-level ROC. Rows are ordered by face id.
pub fn evaluate_run(manifest: &SpliceManifest, scores: &ScoreTable, lambda: f64) -> Result<Report, EvalError> {
    if !(lambda >= 0.0) {
        return Err(EvalError::NegativeLambda(lambda));
    }
    let faces: Vec<(FaceKey, bool)> = manifest
        .entries
        .iter()
        .flat_map(|e| {
            (0..e.faces.len()).map(move |k| {
                (
                    face_key(&e.image, k),
                    e.label == Label::Tampered && e.is_tampered_face(k),
                )
            })
        })
        .collect();
    let has_f = faces.iter().any(|(k, _)| scores.get(k).is_some_and(|s| s.f.is_some()));
    let has_s = faces.iter().any(|(k, _)| scores.get(k).is_some_and(|s| s.sbar.is_some()));
    if !has_f && !has_s {
        return Err(EvalError::NoStreams);
    }
    if !has_s && lambda != 0.0 {
        return Err(EvalError::NoPatchStream(lambda));
    }
    let use_s = has_s && (lambda != 0.0 || !has_f);
    let missing = |pred: &dyn Fn(&StreamScores) -> bool| -> Vec<String> {
        faces
            .iter()
            .filter(|(k, _)| !scores.get(k).is_some_and(pred))
            .map(|(k, _)| face_id(k))
            .collect()
    };
    if has_f {
        let m = missing(&|s| s.f.is_some());
        if !m.is_empty() {
            return Err(EvalError::MissingScores {
                stream: "appearance",
                faces: m,
            });
        }
    }
    if use_s {
        let m = missing(&|s| s.sbar.is_some());
        if !m.is_empty() {
            return Err(EvalError::MissingScores {
                stream: "patch",
                faces: m,
            });
        }
    }
    // with only the patch stream, S̄ alone ranks the faces
    let lambda_eff = if has_f { lambda } else { 1.0 };
    let mut rows: Vec<FaceScore> = faces
        .into_iter()
        .map(|(key, tampered)| {
            let s = scores.get(&key).copied().unwrap_or_default();
            let f = s.f.unwrap_or(0.0);
            let fused = if use_s {
                fuse(f, s.sbar.unwrap_or(0.0), lambda_eff)
            } else {
                f
            };
            FaceScore {
                key,
                tampered,
                f: s.f,
                sbar: s.sbar,
                n_q: s.n_q,
                fused,
            }
        })
        .collect();
    rows.sort_by(|a, b| face_id(&a.key).cmp(&face_id(&b.key)).then(a.key.cmp(&b.key)));
    let fused: Vec<f64> = rows.iter().map(|r| r.fused).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.tampered).collect();
    let roc = roc_auc(&fused, &labels)?;
    Ok(Report { rows, roc, lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{ManifestEntry, Rect};
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let (mut p, mut n) = (0, 0);
        for (i, &li) in labels.iter().enumerate() {
            if li {
                p += 1;
            } else {
                n += 1;
            }
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / (p * n) as f64
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse(0.6, 0.8, 0.0), 0.6);
        assert!((fuse(0.6, 0.8, 1.0) - 1.4).abs() < 1e-15);
        assert!(fuse(0.6, 0.81, 0.5) > fuse(0.6, 0.8, 0.5));
    }

    #[test]
    fn auc_examples() {
        let l = [false, true, false, true];
        assert_eq!(auc_rank(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 1.0);
        assert_eq!(auc_rank(&[0.3; 4], &l).unwrap(), 0.5);
        assert_eq!(auc_rank(&[0.9, 0.1, 0.8, 0.2], &l).unwrap(), 0.0);
        assert!(matches!(
            auc_rank(&[0.1, 0.2], &[true, true]),
            Err(EvalError::SingleClass { .. })
        ));
        let roc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap();
        assert_eq!(roc.points.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(roc.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert_eq!(roc.trapezoid_auc(), 1.0);
    }

    #[test]
    fn lambda_calibration() {
        // F alone is perfect, S is noise: smallest λ keeps AUC 1
        let labels = [true, true, false, false];
        let f = [0.9, 0.8, 0.2, 0.1];
        let s = [0.1, 0.3, 0.9, 0.2];
        assert_eq!(calibrate_lambda(&f, &s, &labels, &DEFAULT_LAMBDA_GRID).unwrap(), 0.25);
        assert_eq!(calibrate_lambda(&f, &s, &labels, &[1.0]).unwrap(), 1.0);
        assert!(calibrate_lambda(&f, &s, &labels, &[]).is_err());

        // only S separates: larger λ keeps helping until AUC saturates
        let f = [0.1, 0.5, 0.6, 0.3, 0.9, 0.2];
        let s = [0.7, 0.8, 0.9, 0.3, 0.2, 0.1];
        let labels = [true, true, true, false, false, false];
        let grid = DEFAULT_LAMBDA_GRID;
        let aucs: Vec<f64> = grid
            .iter()
            .map(|&l| {
                let fused: Vec<f64> = f.iter().zip(&s).map(|(a, b)| a + l * b).collect();
                brute_auc(&fused, &labels)
            })
            .collect();
        let best = aucs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let want = grid[aucs.iter().position(|&a| a == best).unwrap()];
        assert_eq!(calibrate_lambda(&f, &s, &labels, &grid).unwrap(), want);
        assert!(want > 0.25);
    }

    fn manifest() -> SpliceManifest {
        let e = |name: &str, tampered: Option<usize>| ManifestEntry {
            image: name.into(),
            label: if tampered.is_some() {
                Label::Tampered
            } else {
                Label::Authentic
            },
            faces: vec![Rect::new(0, 0, 10, 10), Rect::new(10, 10, 10, 10)],
            tampered_face: tampered,
            mask: None,
            donor_info: String::new(),
        };
        SpliceManifest::new(".", vec![e("a.jpg", Some(1)), e("b.jpg", None), e("c.jpg", Some(0))])
    }

    fn table(vals: &[(&str, usize, f64, f64)]) -> ScoreTable {
        vals.iter()
            .map(|&(i, k, f, s)| {
                (
                    (i.to_string(), k),
                    StreamScores {
                        f: Some(f),
                        sbar: Some(s),
                        n_q: Some(2),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn hand_evaluated_run() {
        let t = table(&[
            ("a.jpg", 0, 0.2, 0.1),
            ("a.jpg", 1, 0.7, 0.9),
            ("b.jpg", 0, 0.3, 0.2),
            ("b.jpg", 1, 0.6, 0.3),
            ("c.jpg", 0, 0.4, 0.8),
            ("c.jpg", 1, 0.1, 0.4),
        ]);
        let r = evaluate_run(&manifest(), &t, 1.0).unwrap();
        let fused: Vec<(String, bool, f64)> = r
            .rows
            .iter()
            .map(|x| (face_id(&x.key), x.tampered, x.fused))
            .collect();
        // hand: a#0 .3, a#1 1.6 (T), b#0 .5, b#1 .9, c#0 1.2 (T), c#1 .5
        let want = [
            ("a.jpg#0", false, 0.3),
            ("a.jpg#1", true, 1.6),
            ("b.jpg#0", false, 0.5),
            ("b.jpg#1", false, 0.9),
            ("c.jpg#0", true, 1.2),
            ("c.jpg#1", false, 0.5),
        ];
        for ((id, t, f), (wid, wt, wf)) in fused.iter().zip(want) {
            assert_eq!((id.as_str(), *t), (wid, wt));
            assert!((f - wf).abs() < 1e-12);
        }
        assert_eq!(r.auc(), 1.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("face_id,label,F,Sbar,Nq,fused\n"));
        assert!(csv.contains("a.jpg#1,1,0.7,0.9,2,1.6"));
        assert!(r.roc_text().ends_with("# auc=1.000\n"));

        // λ = 0 reproduces F-only AUC
        let r0 = evaluate_run(&manifest(), &t, 0.0).unwrap();
        let fs: Vec<f64> = r0.rows.iter().map(|x| x.f.unwrap()).collect();
        let ls: Vec<bool> = r0.rows.iter().map(|x| x.tampered).collect();
        assert_eq!(r0.auc(), auc_rank(&fs, &ls).unwrap());
    }

    #[test]
    fn missing_scores_are_listed() {
        let t = table(&[("a.jpg", 0, 0.2, 0.1), ("a.jpg", 1, 0.7, 0.9)]);
        match evaluate_run(&manifest(), &t, 1.0) {
            Err(EvalError::MissingScores { faces, .. }) => {
                assert_eq!(faces, vec!["b.jpg#0", "b.jpg#1", "c.jpg#0", "c.jpg#1"])
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicated_faces_keep_auc() {
        let m = manifest();
        let t = table(&[
            ("a.jpg", 0, 0.2, 0.1),
            ("a.jpg", 1, 0.3, 0.2),
            ("b.jpg", 0, 0.3, 0.2),
            ("b.jpg", 1, 0.6, 0.3),
            ("c.jpg", 0, 0.4, 0.8),
            ("c.jpg", 1, 0.1, 0.4),
        ]);
        let base = evaluate_run(&m, &t, 1.0).unwrap();
        let mut doubled = m.clone();
        let mut t2 = t.clone();
        for e in &m.entries {
            let mut e2 = e.clone();
            e2.image = format!("dup_{}", e.image.display()).into();
            for k in 0..2 {
                let s = t[&face_key(&e.image, k)];
                t2.insert(face_key(&e2.image, k), s);
            }
            doubled.entries.push(e2);
        }
        assert_eq!(evaluate_run(&doubled, &t2, 1.0).unwrap().auc(), base.auc());
    }

    #[test]
    fn score_table_roundtrip() {
        let mut t = table(&[("a b.jpg", 0, 0.25, 0.5)]);
        t.insert(
            ("c,d.jpg".into(), 3),
            StreamScores {
                f: Some(0.1),
                sbar: None,
                n_q: None,
            },
        );
        let text = write_score_table(&t);
        assert!(text.starts_with("image,face_index,F,Sbar,Nq\n"));
        assert_eq!(read_score_table(&text, Path::new("t")).unwrap(), t);
        let dup = format!("{text}a b.jpg,0,1,1,1\n");
        assert!(read_score_table(&dup, Path::new("t")).is_err());
    }

    proptest! {
        #[test]
        fn rank_auc_equals_brute_force(raw in proptest::collection::vec((0u8..12, any::<bool>()), 2..50)) {
            let scores: Vec<f64> = raw.iter().map(|x| x.0 as f64 / 4.0).collect();
            let labels: Vec<bool> = raw.iter().map(|x| x.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auc_rank(&scores, &labels).unwrap();
            prop_assert_eq!(a, brute_auc(&scores, &labels));
            let roc = roc_auc(&scores, &labels).unwrap();
            prop_assert!((roc.trapezoid_auc() - a).abs() < 1e-12);
            for w in roc.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
            // strictly increasing transform leaves AUC unchanged
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc_rank(&warped, &labels).unwrap(), a);
        }

        #[test]
        fn permuted_faces_give_identical_rows(seed in any::<u64>()) {
            let m = manifest();
            let mut r = seed;
            let mut next = || { r = r.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (r >> 40) as f64 / (1u64 << 24) as f64 };
            let names = ["a.jpg", "b.jpg", "c.jpg"];
            let vals: Vec<(&str, usize, f64, f64)> = names.iter().flat_map(|n| [(*n, 0, 0.0, 0.0), (*n, 1, 0.0, 0.0)]).collect();
            let vals: Vec<(&str, usize, f64, f64)> = vals.into_iter().map(|(n, k, _, _)| (n, k, next(), next())).collect();
            let t = table(&vals);
            let mut rev = m.clone();
            rev.entries.reverse();
            let a = evaluate_run(&m, &t, 1.0).unwrap();
            let b = evaluate_run(&rev, &t, 1.0).unwrap();
            prop_assert_eq!(a.to_csv(), b.to_csv());
        }
    }
}
