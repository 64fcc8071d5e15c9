//! Independent reference implementations and random instance generators
//! shared by the property and acceptance tests. None of these call into the
//! library code paths they are compared against, apart from `iou`.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeSet;

use detfuse::geom::iou;
use detfuse::{
    BBox, CalibratedSample, Detection, FusedDetection, FusedOutputs, GroundTruth, GtBox,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// ECE evaluated bin by bin, filtering the whole sample set for each bin.
pub fn ece_direct(samples: &[CalibratedSample], bins: usize) -> f64 {
    let n = samples.len() as f64;
    let mut total = 0.0;
    for m in 1..=bins {
        let lo = (m - 1) as f64 / bins as f64;
        let hi = m as f64 / bins as f64;
        let members: Vec<&CalibratedSample> = samples
            .iter()
            .filter(|s| {
                (s.confidence > lo && s.confidence <= hi) || (m == 1 && s.confidence == 0.0)
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let conf: f64 = members.iter().map(|s| s.confidence).sum::<f64>() / k;
        let acc = members.iter().filter(|s| s.correct).count() as f64 / k;
        total += k / n * (acc - conf).abs();
    }
    total
}

pub fn random_samples(r: &mut ChaCha8Rng, max_n: usize, bins: usize) -> Vec<CalibratedSample> {
    let n = r.random_range(1..=max_n);
    (0..n)
        .map(|_| {
            // Mix in exact bin edges and the endpoints.
            let c = match r.random_range(0..10) {
                0 => r.random_range(0..=bins) as f64 / bins as f64,
                1 => 0.0,
                2 => 1.0,
                _ => r.random::<f64>(),
            };
            CalibratedSample::new(c, r.random_bool(0.5))
        })
        .collect()
}

fn rank(a: &(usize, &Detection), b: &(usize, &Detection)) -> Ordering {
    match b.1.score.partial_cmp(&a.1.score).unwrap() {
        Ordering::Equal => (a.1.model_id, a.0).cmp(&(b.1.model_id, b.0)),
        o => o,
    }
}

/// Greedy NMS by exhaustive search: the answer is the unique subset `S` of
/// the ranked boxes such that a box is in `S` exactly when no higher-ranked
/// member of `S` of the same category overlaps it above the threshold.
pub fn nms_exhaustive(dets: &[Detection], thr: f64) -> Vec<Detection> {
    assert!(dets.len() <= 12, "exhaustive reference is exponential");
    let mut ranked: Vec<(usize, &Detection)> = dets.iter().enumerate().collect();
    ranked.sort_by(rank);
    let n = ranked.len();
    let mut found: Vec<u32> = Vec::new();
    for mask in 0u32..(1 << n) {
        let ok = (0..n).all(|i| {
            let blocked = (0..i).any(|j| {
                mask & (1 << j) != 0
                    && ranked[j].1.category == ranked[i].1.category
                    && iou(&ranked[j].1.bbox, &ranked[i].1.bbox) > thr
            });
            (mask & (1 << i) != 0) == !blocked
        });
        if ok {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "greedy-maximal subset must be unique");
    (0..n)
        .filter(|i| found[0] & (1 << i) != 0)
        .map(|i| ranked[i].1.clone())
        .collect()
}

/// Straight-line WBF for one image, written from the algorithm description.
pub fn wbf_reference(
    dets: &[Detection],
    n_models: usize,
    thr: f64,
    skip: f64,
    rescale: bool,
) -> Vec<(BBox, u64, f64, [f64; 4], usize)> {
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.score > skip)
        .collect();
    ranked.sort_by(rank);
    // (category, members, fused box)
    let mut clusters: Vec<(u64, Vec<&Detection>, [f64; 4])> = Vec::new();
    for (_, d) in ranked {
        let mut best = None;
        let mut best_iou = thr;
        for (ci, (cat, _, fb)) in clusters.iter().enumerate() {
            if *cat != d.category {
                continue;
            }
            let fb = BBox::new(fb[0], fb[1], fb[2], fb[3]).unwrap();
            let u = iou(&fb, &d.bbox);
            if u > best_iou {
                best_iou = u;
                best = Some(ci);
            }
        }
        let ci = match best {
            Some(ci) => ci,
            None => {
                clusters.push((d.category, Vec::new(), [0.0; 4]));
                clusters.len() - 1
            }
        };
        let c = &mut clusters[ci];
        c.1.push(d);
        let w: f64 = c.1.iter().map(|m| m.score).sum();
        c.2 = [0, 1, 2, 3].map(|k| {
            c.1.iter()
                .map(|m| m.score * m.bbox.corners()[k])
                .sum::<f64>()
                / w
        });
    }
    clusters
        .into_iter()
        .map(|(cat, members, fb)| {
            let t = members.len();
            let mut score = members.iter().map(|m| m.score).sum::<f64>() / t as f64;
            if rescale {
                score *= t.min(n_models) as f64 / n_models as f64;
            }
            let var = [0, 1, 2, 3].map(|k| {
                let mean = members.iter().map(|m| m.bbox.corners()[k]).sum::<f64>() / t as f64;
                members
                    .iter()
                    .map(|m| (m.bbox.corners()[k] - mean).powi(2))
                    .sum::<f64>()
                    / t as f64
            });
            (
                BBox::new(fb[0], fb[1], fb[2].max(fb[0]), fb[3].max(fb[1])).unwrap(),
                cat,
                score,
                var,
                t,
            )
        })
        .collect()
}

/// Detections in one image, drawn around a few centres so that overlaps
/// are common. Scores come from a coarse grid to produce ties.
pub fn random_detections(r: &mut ChaCha8Rng, max_n: usize, n_models: usize) -> Vec<Detection> {
    let n = r.random_range(0..=max_n);
    let centres: Vec<(f64, f64)> = (0..r.random_range(1..=4))
        .map(|_| (r.random_range(0.0..60.0), r.random_range(0.0..60.0)))
        .collect();
    (0..n)
        .map(|_| {
            let (cx, cy) = centres[r.random_range(0..centres.len())];
            let x = cx + r.random_range(-4.0..4.0);
            let y = cy + r.random_range(-4.0..4.0);
            let w = r.random_range(4.0..20.0);
            let h = r.random_range(4.0..20.0);
            let score = if r.random_bool(0.3) {
                r.random_range(0..=10) as f64 / 10.0
            } else {
                r.random::<f64>()
            };
            Detection::new(
                BBox::new(x, y, x + w, y + h).unwrap(),
                r.random_range(1..=2),
                score,
                r.random_range(0..n_models),
                1,
            )
            .unwrap()
        })
        .collect()
}

/// A small evaluation instance: ground truth plus detections that are
/// sometimes near a ground-truth box and sometimes not.
pub fn random_eval_instance(
    r: &mut ChaCha8Rng,
    max_images: usize,
    max_dets: usize,
    max_gt: usize,
) -> (FusedOutputs, GroundTruth) {
    let mut gt = GroundTruth::default();
    let mut fused = FusedOutputs::new();
    let images = r.random_range(1..=max_images) as u64;
    for image in 1..=images {
        let n_gt = r.random_range(0..=max_gt);
        let boxes: Vec<GtBox> = (0..n_gt)
            .map(|_| {
                let x = r.random_range(0.0..50.0);
                let y = r.random_range(0.0..50.0);
                let w = r.random_range(5.0..20.0);
                let h = r.random_range(5.0..20.0);
                GtBox {
                    bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                    category: r.random_range(1..=2),
                }
            })
            .collect();
        let n_det = r.random_range(0..=max_dets);
        let dets: Vec<FusedDetection> = (0..n_det)
            .map(|_| {
                let (bbox, category) = if !boxes.is_empty() && r.random_bool(0.7) {
                    let g = boxes[r.random_range(0..boxes.len())];
                    let s = r.random_range(0.0..3.0);
                    (
                        g.bbox
                            .translate(r.random_range(-s..=s), r.random_range(-s..=s)),
                        g.category,
                    )
                } else {
                    let x = r.random_range(0.0..50.0);
                    let y = r.random_range(0.0..50.0);
                    (
                        BBox::new(x, y, x + 10.0, y + 10.0).unwrap(),
                        r.random_range(1..=2),
                    )
                };
                let score = if r.random_bool(0.2) {
                    r.random_range(0..=4) as f64 / 4.0
                } else {
                    r.random::<f64>()
                };
                FusedDetection {
                    bbox,
                    category,
                    score,
                    variance: [0.0; 4],
                    cluster_size: 1,
                    source_model_ids: BTreeSet::from([0]),
                }
            })
            .collect();
        gt.boxes.insert(image, boxes);
        fused.insert(image, dets);
    }
    (fused, gt)
}

/// AP by explicit PR-curve enumeration: for every recall level, the
/// interpolated precision is the maximum precision over all ranks whose
/// recall reaches that level.
pub fn ap_bruteforce(fused: &FusedOutputs, gt: &GroundTruth, iou_t: f64) -> f64 {
    let cats: BTreeSet<u64> = gt.boxes.values().flatten().map(|g| g.category).collect();
    assert!(!cats.is_empty());
    let mut sum = 0.0;
    for &cat in &cats {
        let n_gt = gt
            .boxes
            .values()
            .flatten()
            .filter(|g| g.category == cat)
            .count();
        // (score, image, rank within image, tp)
        let mut hits: Vec<(f64, u64, usize, bool)> = Vec::new();
        for (&image, dets) in fused {
            let truth: Vec<&GtBox> = gt.get(image).iter().filter(|g| g.category == cat).collect();
            let mut used = vec![false; truth.len()];
            let mut mine: Vec<(usize, &FusedDetection)> = dets
                .iter()
                .enumerate()
                .filter(|(_, d)| d.category == cat)
                .collect();
            mine.sort_by(|a, b| {
                b.1.score
                    .partial_cmp(&a.1.score)
                    .unwrap()
                    .then(a.0.cmp(&b.0))
            });
            for (k, (_, d)) in mine.iter().enumerate() {
                let mut pick: Option<usize> = None;
                let mut pick_iou = -1.0;
                for (j, g) in truth.iter().enumerate() {
                    let u = iou(&d.bbox, &g.bbox);
                    if !used[j] && u >= iou_t && u > pick_iou {
                        pick = Some(j);
                        pick_iou = u;
                    }
                }
                if let Some(j) = pick {
                    used[j] = true;
                }
                hits.push((d.score, image, k, pick.is_some()));
            }
        }
        hits.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let points: Vec<(f64, f64)> = (1..=hits.len())
            .map(|k| {
                let tp = hits[..k].iter().filter(|h| h.3).count() as f64;
                (tp / k as f64, tp / n_gt as f64)
            })
            .collect();
        let mut ap = 0.0;
        for level in 0..=100 {
            let r = level as f64 / 100.0;
            let best = points
                .iter()
                .filter(|(_, rec)| *rec >= r)
                .map(|(p, _)| *p)
                .fold(0.0f64, f64::max);
            ap += best;
        }
        sum += ap / 101.0;
    }
    sum / cats.len() as f64
}

/// Random fused outputs for serialization tests.
pub fn random_fused(r: &mut ChaCha8Rng) -> FusedOutputs {
    let mut out = FusedOutputs::new();
    for image in 0..r.random_range(1..6u64) {
        let dets = (0..r.random_range(0..8))
            .map(|_| {
                let x = r.random_range(-100.0..1500.0);
                let y = r.random_range(-100.0..1500.0);
                let w = r.random_range(0.0..300.0);
                let h = r.random_range(0.0..300.0);
                FusedDetection {
                    bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                    category: r.random_range(1..5),
                    score: r.random::<f64>(),
                    variance: [0, 1, 2, 3].map(|_| r.random_range(0.0..50.0)),
                    cluster_size: r.random_range(1..5),
                    source_model_ids: (0..r.random_range(1..4)).collect(),
                }
            })
            .collect();
        out.insert(image * 3 + 1, dets);
    }
    out
}
