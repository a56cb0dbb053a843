//! Synthetic episodic data: moving-shape videos with exact masks, class
//! folds, and the meta-train/meta-test support/query samplers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Shape families; class identity is the family, never color or texture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Disc,
    Square,
    Triangle,
    Ring,
    Bar,
    Cross,
    Diamond,
    Ellipse,
}

pub const FAMILIES: [ShapeFamily; 8] = [
    ShapeFamily::Disc,
    ShapeFamily::Square,
    ShapeFamily::Triangle,
    ShapeFamily::Ring,
    ShapeFamily::Bar,
    ShapeFamily::Cross,
    ShapeFamily::Diamond,
    ShapeFamily::Ellipse,
];

/// One synthetic class: a shape family plus its motion and distractor
/// policy.
#[derive(Clone, Copy, Debug)]
pub struct SynthClassSpec {
    pub id: usize,
    pub family: ShapeFamily,
    /// Rotation is part of the motion model only where it changes the
    /// silhouette.
    pub rotates: bool,
    pub max_distractors: usize,
}

pub fn class_spec(id: usize) -> SynthClassSpec {
    let family = FAMILIES[id % FAMILIES.len()];
    let rotates = matches!(
        family,
        ShapeFamily::Triangle | ShapeFamily::Bar | ShapeFamily::Cross
    );
    SynthClassSpec {
        id,
        family,
        rotates,
        max_distractors: 2,
    }
}

/// Base/novel class split for one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub novel: Vec<usize>,
    pub base: Vec<usize>,
}

/// Deterministic partition of `c` classes into `o` folds of equal novel
/// sets; every class is novel in exactly one fold.
pub fn make_folds(c: usize, o: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if o == 0 || c == 0 || c % o != 0 {
        return Err(Error::Config(format!(
            "fold count {o} must divide class count {c}"
        )));
    }
    let mut ids: Vec<usize> = (0..c).collect();
    let mut rng = crate::rng::stream(seed, "folds", 0);
    // Fisher-Yates
    for i in (1..c).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let per = c / o;
    Ok((0..o)
        .map(|f| {
            let novel: Vec<usize> = ids[f * per..(f + 1) * per].to_vec();
            let base: Vec<usize> = ids
                .iter()
                .copied()
                .filter(|id| !novel.contains(id))
                .collect();
            FoldSplit {
                fold: f + 1,
                novel,
                base,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    MetaTrain,
    MetaTest,
}

/// One sampled task: K support image/mask pairs and a query clip with
/// per-frame ground truth.
#[derive(Clone, Debug)]
pub struct Episode<T> {
    pub class_id: usize,
    pub seed: u64,
    /// `([h,w,3] image, [h,w] binary mask)` pairs.
    pub support: Vec<(Tensor<T>, Tensor<T>)>,
    /// `[t,h,w,3]` clip.
    pub query: Tensor<T>,
    /// `[t,h,w]` binary masks.
    pub query_masks: Tensor<T>,
}

/// Linear drift plus optional rotation, in pixels/frame and radians/frame.
#[derive(Clone, Copy, Debug)]
pub struct MotionSpec {
    pub velocity: (f64, f64),
    pub rotation: f64,
}

struct Instance {
    family: ShapeFamily,
    cx: f64,
    cy: f64,
    size: f64,
    angle: f64,
    color: [f64; 3],
}

impl Instance {
    fn covers(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        let (sin, cos) = self.angle.sin_cos();
        // inverse-rotate into shape-local coordinates
        let x = (dx * cos + dy * sin) / self.size;
        let y = (-dx * sin + dy * cos) / self.size;
        match self.family {
            ShapeFamily::Disc => x * x + y * y <= 1.0,
            ShapeFamily::Square => x.abs() <= 1.0 && y.abs() <= 1.0,
            ShapeFamily::Triangle => {
                // vertices (0,-1), (-1,1), (1,1)
                y <= 1.0 && y + 1.0 >= 2.0 * x.abs()
            }
            ShapeFamily::Ring => {
                let r2 = x * x + y * y;
                (0.25..=1.0).contains(&r2)
            }
            ShapeFamily::Bar => x.abs() <= 1.0 && y.abs() <= 0.35,
            ShapeFamily::Cross => {
                (x.abs() <= 0.35 && y.abs() <= 1.0) || (x.abs() <= 1.0 && y.abs() <= 0.35)
            }
            ShapeFamily::Diamond => x.abs() + y.abs() <= 1.0,
            ShapeFamily::Ellipse => x * x + (y / 0.55) * (y / 0.55) <= 1.0,
        }
    }
}

fn sample_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
    ]
}

struct Background {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, [f64; 3])>, // (fx, fy, phase, amplitude per channel)
    noise: Vec<f64>, // static [h*w*3] texture
    w: usize,
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let base = [
            rng.gen_range(0.3..0.7),
            rng.gen_range(0.3..0.7),
            rng.gen_range(0.3..0.7),
        ];
        let waves = (0..2)
            .map(|_| {
                (
                    rng.gen_range(0.5..2.5) * core::f64::consts::TAU / w as f64,
                    rng.gen_range(0.5..2.5) * core::f64::consts::TAU / h as f64,
                    rng.gen_range(0.0..core::f64::consts::TAU),
                    [
                        rng.gen_range(-0.12..0.12),
                        rng.gen_range(-0.12..0.12),
                        rng.gen_range(-0.12..0.12),
                    ],
                )
            })
            .collect();
        let noise = (0..h * w * 3).map(|_| rng.gen_range(-0.03..0.03)).collect();
        let _ = h;
        Background {
            base,
            waves,
            noise,
            w,
        }
    }

    fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        let mut v = self.base[c] + self.noise[(y * self.w + x) * 3 + c];
        for (fx, fy, phase, amp) in &self.waves {
            v += amp[c] * (fx * x as f64 + fy * y as f64 + phase).sin();
        }
        v.clamp(0.0, 1.0)
    }
}

/// Renders a clip with an explicitly specified target motion. The target
/// is painted last, so its mask pixels carry exactly its color.
pub fn render_video_with_motion<T: Scalar>(
    spec: &SynthClassSpec,
    t: usize,
    h: usize,
    w: usize,
    motion: MotionSpec,
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if t == 0 || h < 8 || w < 8 {
        return Err(Error::Config(format!("invalid extents t={t}, {h}x{w}")));
    }
    let mut rng = crate::rng::stream(seed, "render", spec.id as u64);
    let bg = Background::sample(&mut rng, h, w);
    let size = rng.gen_range(0.16..0.24) * h.min(w) as f64;
    let cx0 = rng.gen_range(0.3..0.7) * w as f64;
    let cy0 = rng.gen_range(0.3..0.7) * h as f64;
    let angle0 = if spec.rotates {
        rng.gen_range(0.0..core::f64::consts::TAU)
    } else {
        0.0
    };
    let color = sample_color(&mut rng);
    let n_distract = rng.gen_range(0..=spec.max_distractors);
    let distractors: Vec<Instance> = (0..n_distract)
        .map(|_| {
            let fam = loop {
                let f = FAMILIES[rng.gen_range(0..FAMILIES.len())];
                if f != spec.family {
                    break f;
                }
            };
            Instance {
                family: fam,
                cx: rng.gen_range(0.15..0.85) * w as f64,
                cy: rng.gen_range(0.15..0.85) * h as f64,
                size: rng.gen_range(0.10..0.18) * h.min(w) as f64,
                angle: rng.gen_range(0.0..core::f64::consts::TAU),
                color: sample_color(&mut rng),
            }
        })
        .collect();

    let mut video = vec![T::zero(); t * h * w * 3];
    let mut masks = vec![T::zero(); t * h * w];
    for frame in 0..t {
        let target = Instance {
            family: spec.family,
            cx: cx0 + motion.velocity.0 * frame as f64,
            cy: cy0 + motion.velocity.1 * frame as f64,
            size,
            angle: angle0 + motion.rotation * frame as f64,
            color,
        };
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut pixel = [bg.at(x, y, 0), bg.at(x, y, 1), bg.at(x, y, 2)];
                for d in &distractors {
                    if d.covers(px, py) {
                        pixel = d.color;
                    }
                }
                let fg = target.covers(px, py);
                if fg {
                    pixel = target.color;
                    any = true;
                    masks[(frame * h + y) * w + x] = T::one();
                }
                let base = ((frame * h + y) * w + x) * 3;
                for c in 0..3 {
                    video[base + c] = s::<T>(pixel[c]);
                }
            }
        }
        if !any {
            return Err(Error::Eval(format!(
                "target left the frame at frame {frame}"
            )));
        }
    }
    Ok((
        Tensor::new(&[t, h, w, 3], video)?,
        Tensor::new(&[t, h, w], masks)?,
    ))
}

/// Renders a clip with a sampled motion model, retrying the motion until
/// the target stays at least partly in frame on every frame.
pub fn render_video<T: Scalar>(
    spec: &SynthClassSpec,
    t: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    for attempt in 0..20 {
        let mut rng = crate::rng::stream(seed, "motion", attempt);
        let motion = MotionSpec {
            velocity: (rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)),
            rotation: if spec.rotates {
                rng.gen_range(-0.06..0.06)
            } else {
                0.0
            },
        };
        match render_video_with_motion(spec, t, h, w, motion, seed ^ (attempt << 32)) {
            Ok(out) => return Ok(out),
            Err(Error::Eval(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Eval(format!(
        "no in-frame motion found for class {} after 20 attempts",
        spec.id
    )))
}

/// Class selection for a phase, exposed for protocol audits.
pub fn choose_class(split: &FoldSplit, phase: Phase, seed: u64) -> usize {
    let pool = match phase {
        Phase::MetaTrain => &split.base,
        Phase::MetaTest => &split.novel,
    };
    let mut rng = crate::rng::stream(seed, "class", split.fold as u64);
    pool[rng.gen_range(0..pool.len())]
}

/// Number of frames in every rendered source video; query clips subsample
/// it with a stride of 5.
pub const SOURCE_FRAMES: usize = 25;
pub const FRAME_STRIDE: usize = 5;

/// Samples one episode: a class from the phase-appropriate pool, K support
/// images rendered from videos distinct from the query video, and a
/// strided query clip. Fully deterministic given the seed.
pub fn sample_episode<T: Scalar>(
    split: &FoldSplit,
    phase: Phase,
    k: usize,
    t: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Episode<T>> {
    if t == 0 || FRAME_STRIDE * (t - 1) >= SOURCE_FRAMES {
        return Err(Error::Config(format!(
            "clip length {t} does not fit {SOURCE_FRAMES} source frames at stride {FRAME_STRIDE}"
        )));
    }
    let class_id = choose_class(split, phase, seed);
    let spec = class_spec(class_id);
    let (video, masks) =
        render_video::<T>(&spec, SOURCE_FRAMES, h, w, crate::rng::derive_seed(seed, "query", 0))?;
    let max_start = SOURCE_FRAMES - 1 - FRAME_STRIDE * (t - 1);
    let mut rng = crate::rng::stream(seed, "clip", 0);
    let start = rng.gen_range(0..=max_start.min(FRAME_STRIDE - 1));
    let frame_idx: Vec<usize> = (0..t).map(|i| start + i * FRAME_STRIDE).collect();
    let mut qv = Vec::with_capacity(t * h * w * 3);
    let mut qm = Vec::with_capacity(t * h * w);
    for &fi in &frame_idx {
        qv.extend_from_slice(&video.data()[fi * h * w * 3..(fi + 1) * h * w * 3]);
        qm.extend_from_slice(&masks.data()[fi * h * w..(fi + 1) * h * w]);
    }
    let mut support = Vec::with_capacity(k);
    for shot in 0..k {
        let (img, m) = render_video::<T>(
            &spec,
            1,
            h,
            w,
            crate::rng::derive_seed(seed, "support-shot", shot as u64 + 1),
        )?;
        support.push((img.reshape(&[h, w, 3])?, m.reshape(&[h, w])?));
    }
    Ok(Episode {
        class_id,
        seed,
        support,
        query: Tensor::new(&[t, h, w, 3], qv)?,
        query_masks: Tensor::new(&[t, h, w], qm)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_exactly() {
        let folds = make_folds(40, 4, 3).unwrap();
        assert_eq!(folds.len(), 4);
        let mut seen = vec![0usize; 40];
        for f in &folds {
            assert_eq!(f.novel.len(), 10);
            assert_eq!(f.base.len(), 30);
            for &id in &f.novel {
                seen[id] += 1;
                assert!(!f.base.contains(&id), "base and novel intersect");
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "each class novel exactly once");

        let tiny = make_folds(4, 4, 0).unwrap();
        for f in &tiny {
            assert_eq!(f.novel.len(), 1);
        }
        assert!(make_folds(10, 4, 0).is_err());
    }

    #[test]
    fn folds_are_deterministic() {
        assert_eq!(make_folds(8, 4, 11).unwrap(), make_folds(8, 4, 11).unwrap());
        assert_ne!(make_folds(8, 4, 11).unwrap(), make_folds(8, 4, 12).unwrap());
    }

    #[test]
    fn meta_test_never_draws_base_classes() {
        let folds = make_folds(8, 4, 5).unwrap();
        let split = &folds[1];
        for seed in 0..1000u64 {
            let c = choose_class(split, Phase::MetaTest, seed);
            assert!(split.novel.contains(&c));
            assert!(!split.base.contains(&c));
            let b = choose_class(split, Phase::MetaTrain, seed);
            assert!(split.base.contains(&b));
        }
    }

    #[test]
    fn episodes_are_reproducible_and_class_consistent() {
        let folds = make_folds(8, 4, 5).unwrap();
        let a = sample_episode::<f64>(&folds[0], Phase::MetaTrain, 2, 2, 32, 32, 77).unwrap();
        let b = sample_episode::<f64>(&folds[0], Phase::MetaTrain, 2, 2, 32, 32, 77).unwrap();
        assert_eq!(a.class_id, b.class_id);
        assert!(a.query.bits_eq(&b.query));
        assert!(a.query_masks.bits_eq(&b.query_masks));
        for ((ia, ma), (ib, mb)) in a.support.iter().zip(&b.support) {
            assert!(ia.bits_eq(ib));
            assert!(ma.bits_eq(mb));
        }
        // masks nonempty, binary
        assert!(a.query_masks.data().iter().any(|&v| v == 1.0));
        assert!(a
            .query_masks
            .data()
            .iter()
            .all(|&v| v == 0.0 || v == 1.0));
        for (_, m) in &a.support {
            assert!(m.data().iter().any(|&v| v == 1.0));
        }
    }

    #[test]
    fn zero_velocity_renders_identical_frames() {
        let spec = class_spec(0);
        let motion = MotionSpec {
            velocity: (0.0, 0.0),
            rotation: 0.0,
        };
        let (video, masks) =
            render_video_with_motion::<f64>(&spec, 3, 32, 32, motion, 9).unwrap();
        let hw3 = 32 * 32 * 3;
        let hw = 32 * 32;
        for f in 1..3 {
            assert_eq!(&video.data()[..hw3], &video.data()[f * hw3..(f + 1) * hw3]);
            assert_eq!(&masks.data()[..hw], &masks.data()[f * hw..(f + 1) * hw]);
        }
    }

    #[test]
    fn drift_moves_the_mask_centroid_two_pixels_per_frame() {
        let spec = class_spec(0); // disc: rotation-free, symmetric
        let motion = MotionSpec {
            velocity: (2.0, 0.0),
            rotation: 0.0,
        };
        let (_, masks) =
            render_video_with_motion::<f64>(&spec, 5, 48, 64, motion, 10).unwrap();
        let centroid_x = |frame: usize| -> f64 {
            let mut sum = 0.0;
            let mut count = 0.0;
            for y in 0..48 {
                for x in 0..64 {
                    if masks.data()[(frame * 48 + y) * 64 + x] == 1.0 {
                        sum += x as f64;
                        count += 1.0;
                    }
                }
            }
            sum / count
        };
        for f in 1..5 {
            let delta = centroid_x(f) - centroid_x(f - 1);
            assert!(
                (delta - 2.0).abs() <= 0.5,
                "frame {f}: centroid moved {delta}"
            );
        }
    }

    #[test]
    fn no_distractors_means_one_connected_component() {
        let spec = SynthClassSpec {
            max_distractors: 0,
            ..class_spec(0)
        };
        let (_, masks) = render_video::<f64>(&spec, 1, 32, 32, 11).unwrap();
        // breadth-first component count over 4-connectivity
        let mut seen = vec![false; 32 * 32];
        let mut components = 0;
        for start in 0..32 * 32 {
            if masks.data()[start] != 1.0 || seen[start] {
                continue;
            }
            components += 1;
            let mut queue = vec![start];
            seen[start] = true;
            while let Some(p) = queue.pop() {
                let (y, x) = (p / 32, p % 32);
                for (ny, nx) in [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ] {
                    if ny < 32 && nx < 32 {
                        let q = ny * 32 + nx;
                        if masks.data()[q] == 1.0 && !seen[q] {
                            seen[q] = true;
                            queue.push(q);
                        }
                    }
                }
            }
        }
        assert_eq!(components, 1);
    }

    #[test]
    fn mask_pixels_carry_exactly_the_target_color() {
        let spec = class_spec(3); // ring
        let (video, masks) = render_video::<f64>(&spec, 2, 32, 32, 12).unwrap();
        // every masked pixel has the same color in every frame
        let mut color: Option<[f64; 3]> = None;
        for f in 0..2 {
            for p in 0..32 * 32 {
                if masks.data()[f * 32 * 32 + p] == 1.0 {
                    let base = (f * 32 * 32 + p) * 3;
                    let px = [
                        video.data()[base],
                        video.data()[base + 1],
                        video.data()[base + 2],
                    ];
                    match &color {
                        Some(c) => assert_eq!(*c, px),
                        None => color = Some(px),
                    }
                }
            }
        }
        assert!(color.is_some());
    }

    #[test]
    fn support_comes_from_different_videos_than_the_query() {
        let folds = make_folds(8, 4, 5).unwrap();
        let ep = sample_episode::<f64>(&folds[0], Phase::MetaTest, 2, 2, 32, 32, 13).unwrap();
        // first query frame differs from each support image
        let first = &ep.query.data()[..32 * 32 * 3];
        for (img, _) in &ep.support {
            assert_ne!(first, img.data());
        }
    }

    #[test]
    fn all_eight_families_render_nonempty_masks() {
        for id in 0..8 {
            let spec = class_spec(id);
            let (_, masks) = render_video::<f64>(&spec, 1, 32, 32, 14 + id as u64).unwrap();
            let count = masks.data().iter().filter(|&&v| v == 1.0).count();
            assert!(count > 10, "family {:?} mask has {count} pixels", spec.family);
        }
    }
}
