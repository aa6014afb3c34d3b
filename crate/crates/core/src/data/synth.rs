//! Procedural walking-figure silhouettes used as a desk-scale stand-in for
//! real gait datasets. Each identity has persistent body and gait
//! parameters; views and walking conditions perturb the rendering.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::data::dataset::{Condition, DatasetIndex, FrameSource, Identity, SequenceDescriptor};
use crate::data::silhouette::{align_silhouette, Silhouette, ALIGNED_HEIGHT, ALIGNED_WIDTH};
use crate::error::{GaitError, Result};
use crate::rng::{stream, GaitRng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub identities: usize,
    pub sequences_per_identity: usize,
    pub views: Vec<u32>,
    pub conditions: Vec<Condition>,
    pub frames_per_sequence: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 8,
            sequences_per_identity: 4,
            views: vec![0, 18],
            conditions: vec![Condition::Nm],
            frames_per_sequence: 40,
            seed: 7,
        }
    }
}

/// Latent body and gait parameters that persist across an identity's sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitParams {
    pub head_radius: f64,
    pub torso_half_width: f64,
    pub torso_length: f64,
    pub limb_width: f64,
    pub stride_amplitude: f64,
    pub stride_period: f64,
    pub arm_length: f64,
    pub arm_swing: f64,
    pub lean: f64,
    pub phase: f64,
}

impl GaitParams {
    fn sample(rng: &mut GaitRng) -> Self {
        GaitParams {
            head_radius: rng.random_range(3.0..6.0),
            torso_half_width: rng.random_range(3.0..7.5),
            torso_length: rng.random_range(15.0..25.0),
            limb_width: rng.random_range(1.2..3.2),
            stride_amplitude: rng.random_range(0.2..0.55),
            stride_period: rng.random_range(14.0..26.0),
            arm_length: rng.random_range(9.0..17.0),
            arm_swing: rng.random_range(0.1..0.6),
            lean: rng.random_range(-0.12..0.12),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }
}

struct Canvas {
    pixels: Vec<f32>,
}

impl Canvas {
    fn new() -> Self {
        Canvas {
            pixels: vec![0.0; ALIGNED_HEIGHT * ALIGNED_WIDTH],
        }
    }

    fn fill(&mut self, inside: impl Fn(f64, f64) -> bool) {
        for y in 0..ALIGNED_HEIGHT {
            for x in 0..ALIGNED_WIDTH {
                if inside(y as f64 + 0.5, x as f64 + 0.5) {
                    self.pixels[y * ALIGNED_WIDTH + x] = 1.0;
                }
            }
        }
    }

    fn ellipse(&mut self, cy: f64, cx: f64, ry: f64, rx: f64) {
        self.fill(|y, x| {
            let dy = (y - cy) / ry;
            let dx = (x - cx) / rx;
            dy * dy + dx * dx <= 1.0
        });
    }

    /// Thick segment ("capsule") between two points.
    fn limb(&mut self, a: (f64, f64), b: (f64, f64), half_width: f64) {
        let (ay, ax) = a;
        let (by, bx) = b;
        let (vy, vx) = (by - ay, bx - ax);
        let len2 = (vy * vy + vx * vx).max(1e-9);
        self.fill(|y, x| {
            let t = (((y - ay) * vy + (x - ax) * vx) / len2).clamp(0.0, 1.0);
            let (py, px) = (ay + t * vy, ax + t * vx);
            (y - py).powi(2) + (x - px).powi(2) <= half_width * half_width
        });
    }
}

/// Horizontal projection of the figure under a camera azimuth.
struct ViewWarp {
    depth_scale: f64,
    width_scale: f64,
    shear: f64,
}

impl ViewWarp {
    fn new(view_deg: u32) -> Self {
        let a = view_deg as f64 * PI / 180.0;
        ViewWarp {
            depth_scale: 0.45 + 0.55 * a.sin().abs(),
            width_scale: 1.0 + 0.25 * a.cos().abs(),
            shear: 0.08 * (2.0 * a).sin(),
        }
    }
}

fn render_frame(
    p: &GaitParams,
    warp: &ViewWarp,
    condition: Condition,
    t: f64,
    sequence_phase: f64,
) -> Silhouette {
    let mut c = Canvas::new();
    let cx = ALIGNED_WIDTH as f64 / 2.0;
    let head_cy = p.head_radius + 1.0;
    let neck_y = head_cy + p.head_radius;
    let hip_y = neck_y + p.torso_length;
    let leg_len = ALIGNED_HEIGHT as f64 - 1.0 - hip_y;
    let omega = 2.0 * PI / p.stride_period;
    let phi = omega * t + p.phase + sequence_phase;
    let x_at = |y: f64, dx: f64| cx + warp.depth_scale * dx + (warp.shear + p.lean) * (y - hip_y);

    let mut torso_hw = p.torso_half_width * warp.width_scale;
    let mut torso_bottom = hip_y;
    if condition == Condition::Cl {
        torso_hw += 2.0;
        torso_bottom += 5.0;
    }
    let torso_cy = (neck_y + torso_bottom) / 2.0;
    c.ellipse(head_cy, x_at(head_cy, 0.0), p.head_radius, p.head_radius * 0.9);
    c.ellipse(torso_cy, x_at(torso_cy, 0.0), (torso_bottom - neck_y) / 2.0 + 0.5, torso_hw);

    for side in [0.0, PI] {
        let theta = p.stride_amplitude * (phi + side).sin();
        // knee bends on the back swing
        let knee_bend = 0.35 * (phi + side).cos().max(0.0);
        let knee = (hip_y + 0.5 * leg_len * theta.cos(), 0.5 * leg_len * theta.sin());
        let foot_theta = theta - knee_bend;
        let foot = (
            knee.0 + 0.5 * leg_len * foot_theta.cos(),
            knee.1 + 0.5 * leg_len * foot_theta.sin(),
        );
        let hip = (hip_y, 0.0);
        c.limb((hip.0, x_at(hip.0, hip.1)), (knee.0, x_at(knee.0, knee.1)), p.limb_width);
        c.limb((knee.0, x_at(knee.0, knee.1)), (foot.0, x_at(foot.0, foot.1)), p.limb_width);

        let swing = -p.arm_swing * (phi + side).sin();
        let shoulder = (neck_y + 2.0, 0.0);
        let hand = (
            shoulder.0 + p.arm_length * swing.cos(),
            p.arm_length * swing.sin(),
        );
        c.limb(
            (shoulder.0, x_at(shoulder.0, shoulder.1)),
            (hand.0, x_at(hand.0, hand.1)),
            p.limb_width * 0.8,
        );
    }

    if condition == Condition::Bg {
        let bag_y = hip_y - 3.0;
        c.ellipse(bag_y, x_at(bag_y, torso_hw + 3.0), 5.0, 3.5);
    }

    Silhouette::new(ALIGNED_HEIGHT, ALIGNED_WIDTH, c.pixels).expect("canvas is 64x44")
}

fn render_sequence(
    p: &GaitParams,
    view: u32,
    condition: Condition,
    frames: usize,
    rng: &mut GaitRng,
) -> Vec<Silhouette> {
    let warp = ViewWarp::new(view);
    let sequence_phase = rng.random_range(0.0..2.0 * PI);
    let tempo = rng.random_range(0.95..1.05);
    (0..frames)
        .map(|t| {
            let raw = render_frame(p, &warp, condition, t as f64 * tempo, sequence_phase);
            // the figure always has a head, so alignment cannot fail
            align_silhouette(&raw).unwrap_or(raw)
        })
        .collect()
}

/// Renders the full dataset in memory. Identities are numbered from 1,
/// sequence indices from 1 within each (identity, condition).
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<DatasetIndex> {
    if cfg.identities == 0
        || cfg.sequences_per_identity == 0
        || cfg.views.is_empty()
        || cfg.conditions.is_empty()
        || cfg.frames_per_sequence == 0
    {
        return Err(GaitError::Config(
            "synthetic dataset counts must all be at least 1".into(),
        ));
    }
    let mut rng = stream(cfg.seed, Stream::Data);
    let params: Vec<GaitParams> = (0..cfg.identities)
        .map(|_| GaitParams::sample(&mut rng))
        .collect();
    let mut sequences = Vec::new();
    for (i, p) in params.iter().enumerate() {
        let identity = (i + 1) as Identity;
        for &condition in &cfg.conditions {
            for seq in 0..cfg.sequences_per_identity {
                for &view in &cfg.views {
                    let frames =
                        render_sequence(p, view, condition, cfg.frames_per_sequence, &mut rng);
                    sequences.push(SequenceDescriptor {
                        identity,
                        view,
                        condition,
                        sequence_index: (seq + 1) as u32,
                        source: FrameSource::Memory(Arc::new(frames)),
                    });
                }
            }
        }
    }
    Ok(DatasetIndex::new(sequences))
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes an in-memory dataset in the CASIA-B directory convention plus a
/// manifest recording the generator settings.
pub fn materialize(index: &DatasetIndex, cfg: &SynthConfig, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| GaitError::io(root, e))?;
    for seq in &index.sequences {
        let dir = root
            .join(format!("{:03}", seq.identity))
            .join(format!("{}-{:02}", seq.condition.as_str(), seq.sequence_index))
            .join(format!("{:03}", seq.view));
        fs::create_dir_all(&dir).map_err(|e| GaitError::io(&dir, e))?;
        let loaded = seq.load()?;
        for (t, frame) in loaded.frames.iter().enumerate() {
            frame.write_png(&dir.join(format!("{t:03}.png")))?;
        }
    }
    let mut manifest = String::new();
    let views: Vec<String> = cfg.views.iter().map(|v| v.to_string()).collect();
    let conds: Vec<&str> = cfg.conditions.iter().map(|c| c.as_str()).collect();
    let _ = writeln!(manifest, "generator = synthetic-walker-v1");
    let _ = writeln!(manifest, "seed = {}", cfg.seed);
    let _ = writeln!(manifest, "identities = {}", cfg.identities);
    let _ = writeln!(manifest, "sequences_per_identity = {}", cfg.sequences_per_identity);
    let _ = writeln!(manifest, "views = {}", views.join(","));
    let _ = writeln!(manifest, "conditions = {}", conds.join(","));
    let _ = writeln!(manifest, "frames_per_sequence = {}", cfg.frames_per_sequence);
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| GaitError::io(&path, e))
}
