//! The K-frame working set sampled during per-frame optimization.
//!
//! The randomly sampled portion refreshes every n frames; the current and
//! previous frames are always members.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::ingest::Frame;

#[derive(Clone, Debug, Default)]
pub struct KeyframeList {
    /// Randomly sampled overlapping frames (at most K-2).
    pub sampled: Vec<usize>,
    pub previous: Option<usize>,
    pub current: usize,
    pub last_update_frame: usize,
}

impl KeyframeList {
    pub fn bootstrap(first_frame: usize) -> Self {
        KeyframeList {
            sampled: Vec::new(),
            previous: None,
            current: first_frame,
            last_update_frame: first_frame,
        }
    }

    /// Advance to a new current frame (the old current becomes previous).
    pub fn set_current(&mut self, frame: usize) {
        if frame != self.current {
            self.previous = Some(self.current);
            self.current = frame;
        }
    }

    /// Member frame indices: sampled entries plus previous and current,
    /// deduplicated, sampled-first.
    pub fn entries(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(self.sampled.len() + 2);
        for &s in &self.sampled {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        if let Some(p) = self.previous {
            if !out.contains(&p) {
                out.push(p);
            }
        }
        if !out.contains(&self.current) {
            out.push(self.current);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries().len()
    }

    pub fn is_empty(&self) -> bool {
        false // current is always a member
    }

    pub fn is_full(&self, k: usize) -> bool {
        self.len() >= k
    }

    /// Uniformly sample one member frame for an optimization iteration.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let entries = self.entries();
        entries[rng.gen_range(0..entries.len())]
    }
}

/// Fraction of `current`'s sparse-depth points that land inside `other`'s
/// image with positive camera depth.
pub fn overlap_fraction(current: &Frame, other: &Frame) -> f64 {
    if current.sparse_depth.is_empty() {
        return 0.0;
    }
    let mut inside = 0usize;
    for s in &current.sparse_depth {
        let px = crate::math::pixel_center(s.u, s.v);
        let world = current
            .pose
            .cam_to_world(&current.intrinsics.back_project(&px, s.depth));
        let cam = other.pose.world_to_cam(&world);
        if cam.z <= 0.0 {
            continue;
        }
        let p = other.intrinsics.project(&cam);
        if p.x >= 0.0 && p.y >= 0.0 && p.x < other.width() as f64 && p.y < other.height() as f64 {
            inside += 1;
        }
    }
    inside as f64 / current.sparse_depth.len() as f64
}

/// Refresh the sampled portion of the keyframe list: candidates are earlier
/// frames with nonzero overlap (current and previous excluded); K-2 are
/// drawn uniformly without replacement, or all of them when fewer exist.
pub fn update_keyframes(
    list: &mut KeyframeList,
    current: &Frame,
    frames: &[Frame],
    k: usize,
    rng: &mut impl Rng,
) {
    list.set_current(current.index);
    let mut candidates: Vec<usize> = frames
        .iter()
        .filter(|f| {
            f.index != current.index
                && Some(f.index) != list.previous
                && overlap_fraction(current, f) > 0.0
        })
        .map(|f| f.index)
        .collect();
    candidates.sort_unstable();
    let want = k.saturating_sub(2);
    let sampled = if candidates.len() <= want {
        candidates
    } else {
        let mut drawn = candidates
            .choose_multiple(rng, want)
            .copied()
            .collect::<Vec<usize>>();
        drawn.sort_unstable();
        drawn
    };
    list.sampled = sampled;
    list.last_update_frame = current.index;
}
