//! Evaluation metrics over generated storyboards, all reference-free of
//! external models: identity consistency from oracle descriptors, scene
//! consistency from background histograms, a rule-based script-alignment
//! checker, and attention-map IoU — plus deterministic CSV/JSON/SVG report
//! generation.
//!
//! Every metric is a pure function of its inputs; scoring different
//! samples is independent, and aggregation follows input order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::{
    oracle_extract_role_feature, parse_script, render_shot, ParsedScript, Placement, Quadrant,
    Region, RoleSpec, Scene, StoryboardSample,
};
use crate::tensor::Tensor;

// ── shared helpers ──────────────────────────────────────────────────────

/// Cosine over nonnegative vectors, clamped into `[0, 1]` (the true value
/// is in range; sqrt/divide rounding can overshoot by one ulp).
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

fn descriptor_cosine(a: &RoleSpec, b: &RoleSpec) -> f64 {
    let (da, db) = (a.descriptor(), b.descriptor());
    let da: Vec<f64> = da.iter().map(|&v| v as f64).collect();
    let db: Vec<f64> = db.iter().map(|&v| v as f64).collect();
    cosine(&da, &db)
}

// ── identity consistency (CIDS analog) ──────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CidsScore {
    /// Mean pairwise descriptor cosine among occurrences of the same role
    /// across shots; 1.0 vacuously when no role recurs.
    pub self_score: f64,
    /// Mean descriptor cosine between each detected occurrence and the
    /// role's ground-truth spec; undetected occurrences score 0.
    pub cross_score: f64,
    /// False when no role was detected in any expected location — both
    /// scores are then reported as 0.
    pub detected_any: bool,
    /// Number of same-role pairs entering `self_score`.
    pub self_pairs: usize,
}

/// Score identity preservation of `generated` against the sample's ground
/// truth. Detection runs the oracle extractor on each expected quadrant;
/// pairing follows the ground-truth placements.
pub fn cids(generated: &[Image], sample: &StoryboardSample) -> Result<CidsScore> {
    if generated.len() != sample.s() {
        return Err(Error::Contract(format!(
            "{} generated shots for a sample with {}",
            generated.len(),
            sample.s()
        )));
    }
    // (role → detected occurrences), in shot order; None = expected but
    // not found.
    let mut occurrences: BTreeMap<usize, Vec<Option<RoleSpec>>> = BTreeMap::new();
    let mut cross_terms = Vec::new();
    let mut detected_any = false;
    for (s, shot) in sample.shots.iter().enumerate() {
        for p in &shot.placements {
            let det = oracle_extract_role_feature(&generated[s], &Region::Quadrant(p.quadrant));
            if det.is_some() {
                detected_any = true;
            }
            cross_terms.push(match &det {
                Some(spec) => descriptor_cosine(spec, &sample.roles[p.role]),
                None => 0.0,
            });
            occurrences.entry(p.role).or_default().push(det);
        }
    }
    if !detected_any {
        return Ok(CidsScore {
            self_score: 0.0,
            cross_score: 0.0,
            detected_any: false,
            self_pairs: 0,
        });
    }
    let cross_score = cross_terms.iter().sum::<f64>() / cross_terms.len() as f64;

    let mut pair_terms = Vec::new();
    for occ in occurrences.values() {
        for i in 0..occ.len() {
            for j in i + 1..occ.len() {
                pair_terms.push(match (&occ[i], &occ[j]) {
                    (Some(a), Some(b)) => descriptor_cosine(a, b),
                    _ => 0.0,
                });
            }
        }
    }
    let self_pairs = pair_terms.len();
    let self_score = if self_pairs == 0 {
        1.0
    } else {
        pair_terms.iter().sum::<f64>() / self_pairs as f64
    };
    Ok(CidsScore { self_score, cross_score, detected_any, self_pairs })
}

// ── scene consistency (CSD analog) ──────────────────────────────────────

/// Disk-shaped exclusion zone around one placed role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleRegion {
    pub cy: usize,
    pub cx: usize,
    pub r: usize,
}

/// Exclusion regions for a shot's placements: glyph disks padded by one
/// pixel (accessories stay within the glyph radius).
pub fn regions_from_placements(placements: &[Placement], size: usize) -> Vec<RoleRegion> {
    placements
        .iter()
        .map(|p| {
            let (cy, cx) = p.quadrant.center(size);
            RoleRegion { cy, cx, r: p.scale.radius(size) + 1 }
        })
        .collect()
}

fn in_region(regions: &[RoleRegion], y: usize, x: usize) -> bool {
    regions.iter().any(|reg| {
        let (dy, dx) = (y as i64 - reg.cy as i64, x as i64 - reg.cx as i64);
        dy * dy + dx * dx <= (reg.r * reg.r) as i64
    })
}

const BG_BINS: usize = 16;

/// Normalized per-channel 16-bin histogram over pixels outside the role
/// regions: the background's color/pattern signature. All-zero when no
/// background pixel remains.
pub fn background_histogram(img: &Image, regions: &[RoleRegion]) -> Vec<f64> {
    let mut hist = vec![0.0f64; 3 * BG_BINS];
    let mut count = 0.0f64;
    for y in 0..img.height() {
        for x in 0..img.width() {
            if in_region(regions, y, x) {
                continue;
            }
            for c in 0..3 {
                let v = img.get(c, y, x).clamp(0.0, 1.0);
                let bin = ((v * BG_BINS as f32) as usize).min(BG_BINS - 1);
                hist[c * BG_BINS + bin] += 1.0;
            }
            count += 1.0;
        }
    }
    if count > 0.0 {
        for h in hist.iter_mut() {
            *h /= count;
        }
    }
    hist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsdScore {
    /// Mean pairwise background-histogram cosine across shots; 1.0
    /// vacuously for a single shot.
    pub self_score: f64,
    /// Mean cosine against the reference scene's background, when given.
    pub cross_score: Option<f64>,
}

/// Scene/style consistency from background histograms. `regions` gives
/// each shot's role-exclusion zones (same length as `shots`).
pub fn csd_analog(
    shots: &[Image],
    regions: &[Vec<RoleRegion>],
    reference: Option<(&Image, &[RoleRegion])>,
) -> Result<CsdScore> {
    if shots.is_empty() {
        return Err(Error::Contract("scene consistency over zero shots".into()));
    }
    if shots.len() != regions.len() {
        return Err(Error::Contract(format!(
            "{} shots but {} region lists",
            shots.len(),
            regions.len()
        )));
    }
    let hists: Vec<Vec<f64>> = shots
        .iter()
        .zip(regions)
        .map(|(img, regs)| background_histogram(img, regs))
        .collect();

    let mut pair_terms = Vec::new();
    for i in 0..hists.len() {
        for j in i + 1..hists.len() {
            pair_terms.push(cosine(&hists[i], &hists[j]));
        }
    }
    let self_score = if pair_terms.is_empty() {
        1.0
    } else {
        pair_terms.iter().sum::<f64>() / pair_terms.len() as f64
    };

    let cross_score = reference.map(|(img, regs)| {
        let ref_hist = background_histogram(img, regs);
        hists.iter().map(|h| cosine(h, &ref_hist)).sum::<f64>() / hists.len() as f64
    });
    Ok(CsdScore { self_score, cross_score })
}

// ── script alignment ────────────────────────────────────────────────────

/// Detected role (if any) per quadrant of one shot.
fn quadrant_detections(img: &Image) -> Vec<(Quadrant, Option<RoleSpec>)> {
    Quadrant::ALL
        .iter()
        .map(|&q| (q, oracle_extract_role_feature(img, &Region::Quadrant(q))))
        .collect()
}

/// Locate a stated role among the detections: prefer a full spec match at
/// the stated quadrant, then anywhere, then a shape match at the stated
/// quadrant, then anywhere. Shape is the presence proxy — a role counts as
/// present when its silhouette is found, even with wrong colors.
fn find_role(
    dets: &[(Quadrant, Option<RoleSpec>)],
    spec: &RoleSpec,
    stated: Quadrant,
) -> Option<(Quadrant, RoleSpec)> {
    let at = |q: Quadrant| dets.iter().find(|(dq, _)| *dq == q).and_then(|(_, d)| d.clone());
    if let Some(d) = at(stated) {
        if d == *spec {
            return Some((stated, d));
        }
    }
    for (q, d) in dets {
        if let Some(d) = d {
            if d == spec {
                return Some((*q, d.clone()));
            }
        }
    }
    if let Some(d) = at(stated) {
        if d.shape == spec.shape {
            return Some((stated, d));
        }
    }
    for (q, d) in dets {
        if let Some(d) = d {
            if d.shape == spec.shape {
                return Some((*q, d.clone()));
            }
        }
    }
    None
}

/// Does the shot's background match the stated scene? Compares the
/// background histogram (outside the stated role disks) against a pure
/// render of the stated scene over the same pixels; exact on clean
/// renders, so the threshold only needs to separate match from mismatch.
fn scene_matches(img: &Image, scene: &Scene, regions: &[RoleRegion]) -> bool {
    let (pure, _) = render_shot(scene, &[], &[], img.height());
    let a = background_histogram(img, regions);
    let b = background_histogram(&pure, regions);
    cosine(&a, &b) >= 0.995
}

/// Fraction of script constraints the generated shots satisfy, averaged
/// over shots. Each clause contributes three constraints — role present,
/// role in the stated quadrant, stated appearance correct — and each shot
/// adds one scene constraint.
pub fn alignment_score(generated: &[Image], scripts: &[Vec<u16>]) -> Result<f64> {
    if generated.len() != scripts.len() {
        return Err(Error::Contract(format!(
            "{} shots but {} scripts",
            generated.len(),
            scripts.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::Contract("alignment over zero shots".into()));
    }
    let mut per_shot = Vec::with_capacity(generated.len());
    for (img, script) in generated.iter().zip(scripts) {
        let parsed = parse_script(script)
            .map_err(|e| Error::Contract(format!("alignment: unparseable script: {e}")))?;
        let ParsedScript::Shot { scene, clauses } = parsed else {
            return Err(Error::Contract(
                "alignment: reference script given where a shot script was expected".into(),
            ));
        };
        let dets = quadrant_detections(img);
        let size = img.height();
        let mut satisfied = 0usize;
        let mut total = 0usize;
        for (spec, stated_q, scale) in &clauses {
            total += 3;
            if let Some((found_q, found)) = find_role(&dets, spec, *stated_q) {
                satisfied += 1; // present
                if found_q == *stated_q {
                    satisfied += 1;
                }
                if found == *spec {
                    satisfied += 1;
                }
            }
            let _ = scale;
        }
        // Scene constraint, excluding the stated role disks.
        let regions: Vec<RoleRegion> = clauses
            .iter()
            .map(|(_, q, scale)| {
                let (cy, cx) = q.center(size);
                RoleRegion { cy, cx, r: scale.radius(size) + 1 }
            })
            .collect();
        total += 1;
        if scene_matches(img, &scene, &regions) {
            satisfied += 1;
        }
        per_shot.push(satisfied as f64 / total as f64);
    }
    Ok(per_shot.iter().sum::<f64>() / per_shot.len() as f64)
}

// ── attention IoU ───────────────────────────────────────────────────────

/// IoU between attention maps and role masks on the latent grid, averaged
/// over pairs. Each map is binarized at its own mean (strictly above);
/// masks at 0.5.
pub fn attention_iou(pairs: &[(Tensor<f32>, Tensor<f32>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("attention IoU over zero pairs".into()));
    }
    let mut total = 0.0f64;
    for (map, mask) in pairs {
        if map.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "attention_iou",
                lhs: map.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let mean = map.data().iter().map(|&v| v as f64).sum::<f64>() / map.data().len() as f64;
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&m, &k) in map.data().iter().zip(mask.data()) {
            let a = (m as f64) > mean;
            let b = k >= 0.5;
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / pairs.len() as f64)
}

// ── reporting ───────────────────────────────────────────────────────────

pub const CSV_HEADER: &str = "sample_id,cids_self,cids_cross,csd_self,csd_cross,alignment,attn_iou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub sample_id: String,
    pub cids_self: f64,
    pub cids_cross: f64,
    pub csd_self: f64,
    pub csd_cross: f64,
    pub alignment: f64,
    pub attn_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cids_self: f64,
    pub cids_cross: f64,
    pub csd_self: f64,
    pub csd_cross: f64,
    pub alignment: f64,
    pub attn_iou: f64,
    pub n_samples: usize,
}

/// One evaluated run: metadata plus per-sample scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub name: String,
    pub checkpoint: String,
    pub config: String,
    pub seeds: Vec<u64>,
    pub samples: Vec<SampleScores>,
}

pub fn aggregate(samples: &[SampleScores]) -> Result<Aggregate> {
    if samples.is_empty() {
        return Err(Error::Contract("aggregate of zero samples".into()));
    }
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleScores) -> f64| samples.iter().map(f).sum::<f64>() / n;
    Ok(Aggregate {
        cids_self: mean(|s| s.cids_self),
        cids_cross: mean(|s| s.cids_cross),
        csd_self: mean(|s| s.csd_self),
        csd_cross: mean(|s| s.csd_cross),
        alignment: mean(|s| s.alignment),
        attn_iou: mean(|s| s.attn_iou),
        n_samples: samples.len(),
    })
}

pub fn csv_lines(samples: &[SampleScores]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.sample_id, s.cids_self, s.cids_cross, s.csd_self, s.csd_cross, s.alignment,
            s.attn_iou
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub checkpoint: String,
    pub config: String,
    pub seeds: Vec<u64>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<RunSummary>,
}

const METRIC_NAMES: [&str; 6] =
    ["cids_self", "cids_cross", "csd_self", "csd_cross", "alignment", "attn_iou"];

fn metric_values(a: &Aggregate) -> [f64; 6] {
    [a.cids_self, a.cids_cross, a.csd_self, a.csd_cross, a.alignment, a.attn_iou]
}

/// Grouped bar chart over the six metrics, one bar per run per metric.
/// Pure string construction — identical inputs give identical SVG.
pub fn render_bar_chart(runs: &[(String, Aggregate)]) -> String {
    let bar_w = 18;
    let gap = 6;
    let group_gap = 28;
    let chart_h = 160;
    let group_w = runs.len() * bar_w + runs.len().saturating_sub(1) * gap;
    let width = 60 + METRIC_NAMES.len() * (group_w + group_gap);
    let height = chart_h + 70;
    let palette = ["#4878a8", "#c06048", "#58a868", "#a868a8", "#c0a040", "#508898"];

    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="10">"#
    );
    svg.push_str(&format!(
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    ));
    for (mi, metric) in METRIC_NAMES.iter().enumerate() {
        let x0 = 40 + mi * (group_w + group_gap);
        for (ri, (_, agg)) in runs.iter().enumerate() {
            let v = metric_values(agg)[mi].clamp(0.0, 1.0);
            let h = (v * chart_h as f64).round() as usize;
            let x = x0 + ri * (bar_w + gap);
            let y = 20 + chart_h - h;
            svg.push_str(&format!(
                r#"<rect x="{x}" y="{y}" width="{bar_w}" height="{h}" fill="{}"/>"#,
                palette[ri % palette.len()]
            ));
            svg.push_str(&format!(
                r#"<text x="{}" y="{}" text-anchor="middle">{v:.2}</text>"#,
                x + bar_w / 2,
                y.saturating_sub(3)
            ));
        }
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" text-anchor="middle">{metric}</text>"#,
            x0 + group_w / 2,
            20 + chart_h + 14
        ));
    }
    for (ri, (name, _)) in runs.iter().enumerate() {
        let y = 20 + chart_h + 30 + ri * 14;
        svg.push_str(&format!(
            r#"<rect x="40" y="{}" width="10" height="10" fill="{}"/>"#,
            y - 9,
            palette[ri % palette.len()]
        ));
        svg.push_str(&format!(r#"<text x="56" y="{y}">{name}</text>"#));
    }
    svg.push_str("</svg>");
    svg
}

/// Write one CSV per run, an aggregate JSON report, and the comparison
/// chart into `dir`. Returns the created paths.
pub fn write_report(dir: &Path, runs: &[EvalRun]) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::Contract("report over zero runs".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files = Vec::new();
    let mut summaries = Vec::new();
    let mut chart_rows = Vec::new();
    for run in runs {
        let csv_path = dir.join(format!("{}.csv", run.name));
        std::fs::write(&csv_path, csv_lines(&run.samples))
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
        files.push(csv_path);
        let agg = aggregate(&run.samples)?;
        summaries.push(RunSummary {
            name: run.name.clone(),
            checkpoint: run.checkpoint.clone(),
            config: run.config.clone(),
            seeds: run.seeds.clone(),
            aggregate: agg.clone(),
        });
        chart_rows.push((run.name.clone(), agg));
    }
    let json_path = dir.join("report.json");
    let body = serde_json::to_string_pretty(&EvalReport { runs: summaries })
        .map_err(|e| Error::Contract(format!("serialize eval report: {e}")))?;
    std::fs::write(&json_path, body).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    files.push(json_path);

    let svg_path = dir.join("chart.svg");
    std::fs::write(&svg_path, render_bar_chart(&chart_rows))
        .map_err(|e| Error::io(svg_path.display().to_string(), e))?;
    files.push(svg_path);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{
        render_reference, script_for_reference, script_for_shot, Accessory, BgColor, ColorName,
        Pattern, RefVariant, ReferenceEntry, Shape, ShotEntry, SizeClass,
    };

    /// Two-role sample where both roles appear in both shots — recurrence
    /// guaranteed, unlike random generation.
    fn crafted_sample() -> StoryboardSample {
        let roles = vec![
            RoleSpec { shape: Shape::Circle, color: ColorName::Red, accessory: Accessory::None },
            RoleSpec { shape: Shape::Square, color: ColorName::Blue, accessory: Accessory::Dot },
        ];
        let scene = Scene { bg: BgColor::White, pattern: Pattern::Plain };
        let size = 48;
        let placements = [
            vec![
                Placement { role: 0, quadrant: Quadrant::TopLeft, scale: SizeClass::Large },
                Placement { role: 1, quadrant: Quadrant::BottomRight, scale: SizeClass::Large },
            ],
            vec![
                Placement { role: 0, quadrant: Quadrant::TopRight, scale: SizeClass::Large },
                Placement { role: 1, quadrant: Quadrant::BottomLeft, scale: SizeClass::Large },
            ],
        ];
        let refs = roles
            .iter()
            .enumerate()
            .map(|(i, role)| {
                let (image, mask) = render_reference(role, RefVariant::CenteredLarge, size);
                ReferenceEntry {
                    role: i,
                    variant: RefVariant::CenteredLarge,
                    image,
                    mask,
                    script: script_for_reference(role),
                }
            })
            .collect();
        let shots = placements
            .iter()
            .map(|ps| {
                let (image, masks) = render_shot(&scene, ps, &roles, size);
                ShotEntry {
                    image,
                    script: script_for_shot(&scene, ps, &roles),
                    placements: ps.clone(),
                    masks,
                }
            })
            .collect();
        StoryboardSample { roles, scene, refs, shots, size }
    }

    fn shot_images(sample: &StoryboardSample) -> Vec<Image> {
        sample.shots.iter().map(|s| s.image.clone()).collect()
    }

    fn reversed(sample: &StoryboardSample) -> StoryboardSample {
        let mut rev = sample.clone();
        rev.shots.reverse();
        rev
    }

    // ── cids ────────────────────────────────────────────────────────────

    #[test]
    fn ground_truth_renders_score_perfect_identity() {
        let sample = crafted_sample();
        let score = cids(&shot_images(&sample), &sample).unwrap();
        assert_eq!(score.self_score, 1.0);
        assert_eq!(score.cross_score, 1.0);
        assert!(score.detected_any);
        assert_eq!(score.self_pairs, 2); // one pair per role

        // Self-score is an unordered pairwise mean: shot order irrelevant.
        let rev = reversed(&sample);
        let score_rev = cids(&shot_images(&rev), &rev).unwrap();
        assert_eq!(score_rev.self_score, score.self_score);
    }

    #[test]
    fn color_swapped_roles_lower_the_cross_score() {
        let sample = crafted_sample();
        // Render the same placements with the two roles' colors swapped.
        let mut swapped_roles = sample.roles.clone();
        swapped_roles[0].color = sample.roles[1].color;
        swapped_roles[1].color = sample.roles[0].color;
        let confused: Vec<Image> = sample
            .shots
            .iter()
            .map(|shot| render_shot(&sample.scene, &shot.placements, &swapped_roles, sample.size).0)
            .collect();
        let score = cids(&confused, &sample).unwrap();
        // Every detection matches shape and accessory but not color: 2/3.
        assert!(score.cross_score < 1.0);
        assert!((score.cross_score - 2.0 / 3.0).abs() < 1e-9);
        // Occurrences still agree with each other, so self stays 1.
        assert_eq!(score.self_score, 1.0);
    }

    #[test]
    fn blank_shots_score_zero_with_a_flag() {
        let sample = crafted_sample();
        let blanks = vec![Image::new(sample.size, sample.size); sample.s()];
        let score = cids(&blanks, &sample).unwrap();
        assert_eq!(score.self_score, 0.0);
        assert_eq!(score.cross_score, 0.0);
        assert!(!score.detected_any);

        let wrong_count = vec![Image::new(sample.size, sample.size)];
        assert!(cids(&wrong_count, &sample).is_err());
    }

    // ── csd ─────────────────────────────────────────────────────────────

    #[test]
    fn identical_backgrounds_are_perfectly_consistent() {
        let scene = Scene { bg: BgColor::Tan, pattern: Pattern::Stripes };
        let (bg, _) = render_shot(&scene, &[], &[], 32);
        let shots = vec![bg.clone(), bg.clone(), bg];
        let score = csd_analog(&shots, &vec![Vec::new(); 3], None).unwrap();
        assert!((score.self_score - 1.0).abs() < 1e-12);
        assert!(score.cross_score.is_none());
    }

    #[test]
    fn disjoint_solid_colors_are_orthogonal() {
        let light = render_shot(&Scene { bg: BgColor::White, pattern: Pattern::Plain }, &[], &[], 32).0;
        let dark = render_shot(&Scene { bg: BgColor::Dark, pattern: Pattern::Plain }, &[], &[], 32).0;
        let score = csd_analog(
            &[light.clone(), dark.clone()],
            &vec![Vec::new(); 2],
            None,
        )
        .unwrap();
        assert!(score.self_score < 1e-9, "{}", score.self_score);

        let cross = csd_analog(&[dark], &[Vec::new()], Some((&light, &[]))).unwrap();
        assert!(cross.cross_score.unwrap() < 1e-9);
    }

    #[test]
    fn stripes_versus_plain_matches_brute_force() {
        let striped = render_shot(&Scene { bg: BgColor::Tan, pattern: Pattern::Stripes }, &[], &[], 32).0;
        let plain = render_shot(&Scene { bg: BgColor::Tan, pattern: Pattern::Plain }, &[], &[], 32).0;
        let score = csd_analog(&[striped.clone(), plain.clone()], &vec![Vec::new(); 2], None)
            .unwrap()
            .self_score;
        assert!(score > 0.0 && score < 1.0, "{score}");

        // Independent histogram evaluation.
        let brute = |img: &Image| {
            let mut h = vec![0.0f64; 48];
            for y in 0..32 {
                for x in 0..32 {
                    for c in 0..3 {
                        let v = img.get(c, y, x).clamp(0.0, 1.0);
                        h[c * 16 + ((v * 16.0) as usize).min(15)] += 1.0;
                    }
                }
            }
            let n = (32 * 32) as f64;
            h.iter_mut().for_each(|v| *v /= n);
            h
        };
        let expect = cosine(&brute(&striped), &brute(&plain));
        assert!((score - expect).abs() < 1e-12);
    }

    #[test]
    fn role_regions_are_excluded_from_backgrounds() {
        let sample = crafted_sample();
        let regions: Vec<Vec<RoleRegion>> = sample
            .shots
            .iter()
            .map(|s| regions_from_placements(&s.placements, sample.size))
            .collect();
        let score = csd_analog(&shot_images(&sample), &regions, None).unwrap();
        // Identical scenes behind different placements: excluding the role
        // disks leaves identical background distributions.
        assert!((score.self_score - 1.0).abs() < 1e-6, "{}", score.self_score);

        // Permutation invariance of the unordered pairwise mean.
        let mut rev_imgs = shot_images(&sample);
        rev_imgs.reverse();
        let mut rev_regions = regions.clone();
        rev_regions.reverse();
        let rev_score = csd_analog(&rev_imgs, &rev_regions, None).unwrap();
        assert_eq!(score.self_score, rev_score.self_score);
    }

    // ── alignment ───────────────────────────────────────────────────────

    #[test]
    fn ground_truth_renders_align_perfectly() {
        let sample = crafted_sample();
        let scripts: Vec<Vec<u16>> = sample.shots.iter().map(|s| s.script.clone()).collect();
        let score = alignment_score(&shot_images(&sample), &scripts).unwrap();
        assert_eq!(score, 1.0);
    }

    #[test]
    fn misplaced_role_satisfies_three_of_four_constraints() {
        let role = RoleSpec {
            shape: Shape::Triangle,
            color: ColorName::Green,
            accessory: Accessory::None,
        };
        let scene = Scene { bg: BgColor::White, pattern: Pattern::Plain };
        let stated = vec![Placement {
            role: 0,
            quadrant: Quadrant::TopLeft,
            scale: SizeClass::Large,
        }];
        let script = script_for_shot(&scene, &stated, std::slice::from_ref(&role));
        // Render the role in the wrong quadrant.
        let actual = vec![Placement {
            role: 0,
            quadrant: Quadrant::BottomRight,
            scale: SizeClass::Large,
        }];
        let (img, _) = render_shot(&scene, &actual, std::slice::from_ref(&role), 48);
        let score = alignment_score(&[img], &[script]).unwrap();
        // Present ✓, stated quadrant ✗, appearance ✓, scene ✓.
        assert!((score - 0.75).abs() < 1e-12, "{score}");
    }

    #[test]
    fn blank_shots_align_to_zero() {
        let sample = crafted_sample();
        let scripts: Vec<Vec<u16>> = sample.shots.iter().map(|s| s.script.clone()).collect();
        let blanks = vec![Image::new(sample.size, sample.size); sample.s()];
        assert_eq!(alignment_score(&blanks, &scripts).unwrap(), 0.0);
    }

    #[test]
    fn unparseable_scripts_are_contract_errors() {
        let sample = crafted_sample();
        let img = sample.shots[0].image.clone();
        assert!(matches!(
            alignment_score(&[img.clone()], &[vec![60000u16]]),
            Err(Error::Contract(_))
        ));
        // A reference script is parseable but not a shot script.
        assert!(matches!(
            alignment_score(&[img], &[sample.refs[0].script.clone()]),
            Err(Error::Contract(_))
        ));
    }

    // ── attention IoU ───────────────────────────────────────────────────

    #[test]
    fn attention_iou_oracle_cases() {
        let mask = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        // Map proportional to the mask: binarized at its mean it matches.
        let map = Tensor::new(vec![2, 2], vec![0.9f32, 0.1, 0.1, 0.9]).unwrap();
        assert_eq!(attention_iou(&[(map, mask.clone())]).unwrap(), 1.0);

        let disjoint = Tensor::new(vec![2, 2], vec![0.0f32, 0.8, 0.8, 0.0]).unwrap();
        assert_eq!(attention_iou(&[(disjoint, mask)]).unwrap(), 0.0);

        // Half overlap: map {0,1}, mask {1,2} → |∩|=1, |∪|=3.
        let map = Tensor::new(vec![2, 2], vec![1.0f32, 1.0, 0.0, 0.0]).unwrap();
        let mask = Tensor::new(vec![2, 2], vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
        assert!((attention_iou(&[(map, mask)]).unwrap() - 1.0 / 3.0).abs() < 1e-12);

        let bad_mask = Tensor::new(vec![4], vec![0.0f32; 4]).unwrap();
        let map = Tensor::new(vec![2, 2], vec![0.0f32; 4]).unwrap();
        assert!(attention_iou(&[(map, bad_mask)]).is_err());
        assert!(attention_iou(&[]).is_err());
    }

    // ── reporting ───────────────────────────────────────────────────────

    fn fake_scores(id: &str, base: f64) -> SampleScores {
        SampleScores {
            sample_id: id.into(),
            cids_self: base,
            cids_cross: base * 0.9,
            csd_self: base * 0.8,
            csd_cross: base * 0.7,
            alignment: base * 0.6,
            attn_iou: base * 0.5,
        }
    }

    #[test]
    fn report_files_are_deterministic_and_consistent() {
        let run = |name: &str| EvalRun {
            name: name.into(),
            checkpoint: "ckpt-final".into(),
            config: "default".into(),
            seeds: vec![1, 2, 3],
            samples: vec![fake_scores("s0", 0.5), fake_scores("s1", 0.75), fake_scores("s2", 1.0)],
        };
        let tmp_a = tempfile::tempdir().unwrap();
        let tmp_b = tempfile::tempdir().unwrap();
        let files_a = write_report(tmp_a.path(), &[run("with"), run("without")]).unwrap();
        let _ = write_report(tmp_b.path(), &[run("with"), run("without")]).unwrap();
        assert_eq!(files_a.len(), 4); // two CSVs, report.json, chart.svg

        // Identical runs → identical CSV bytes.
        let csv_a = std::fs::read(tmp_a.path().join("with.csv")).unwrap();
        let csv_b = std::fs::read(tmp_b.path().join("with.csv")).unwrap();
        assert_eq!(csv_a, csv_b);

        // Aggregate equals the mean of the CSV rows.
        let text = String::from_utf8(csv_a).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let mut sums = [0.0f64; 6];
        let mut rows = 0;
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 7);
            for (i, f) in fields[1..].iter().enumerate() {
                sums[i] += f.parse::<f64>().unwrap();
            }
            rows += 1;
        }
        let agg = aggregate(&run("with").samples).unwrap();
        let expect = metric_values(&agg);
        for i in 0..6 {
            assert!((sums[i] / rows as f64 - expect[i]).abs() < 1e-9);
        }

        // The chart names exactly the runs provided.
        let svg = std::fs::read_to_string(tmp_a.path().join("chart.svg")).unwrap();
        assert!(svg.contains(">with<") && svg.contains(">without<"));
        assert!(!svg.contains(">other<"));

        // JSON parses back with both summaries.
        let report: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(tmp_a.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report.runs.len(), 2);
        assert_eq!(report.runs[0].aggregate.n_samples, 3);
    }
}
