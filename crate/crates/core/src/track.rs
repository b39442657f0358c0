//! Closed race tracks: procedural generation and track-relative queries.
//!
//! A track is a closed centerline resampled at uniform arc spacing. The last
//! stored point repeats the first one so that `arc_length` ends at the total
//! lap length. Curvature is signed, positive for left turns.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACK_SCHEMA: &str = "track/1";

/// Parameters of the ring-with-noise track generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackParams {
    pub control_points: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Angular jitter of the control points as a fraction of their spacing.
    pub angle_jitter: f64,
    pub smoothing_passes: usize,
    pub width: f64,
    pub spacing: f64,
    pub segment_length: f64,
    pub max_attempts: usize,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            control_points: 10,
            radius_min: 55.0,
            radius_max: 95.0,
            angle_jitter: 0.25,
            smoothing_passes: 6,
            width: 10.0,
            spacing: 1.0,
            segment_length: 25.0,
            max_attempts: 64,
        }
    }
}

impl TrackParams {
    /// A constant-radius ring.
    pub fn circle(radius: f64) -> Self {
        Self {
            control_points: 64,
            radius_min: radius,
            radius_max: radius,
            angle_jitter: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSpec {
    pub seed: u64,
    pub width: f64,
    pub centerline: Vec<[f64; 2]>,
    pub arc_length: Vec<f64>,
    pub curvature: Vec<f64>,
    pub segment_ids: Vec<usize>,
    segment_curvature: Vec<f64>,
    segment_start: Vec<f64>,
}

/// Result of projecting a point onto the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    /// Arc length of the projection, in `[0, total_length)`.
    pub s: f64,
    /// Signed lateral offset, positive to the left of the driving direction.
    pub d: f64,
    /// Centerline heading at `s`.
    pub heading: f64,
}

pub fn generate_track(seed: u64, params: &TrackParams) -> Result<TrackSpec> {
    if params.control_points < 3
        || !(params.radius_min > 0.0 && params.radius_max >= params.radius_min)
        || !(params.width > 0.0 && params.spacing > 0.0 && params.segment_length > 0.0)
    {
        return Err(Error::Invalid(format!("bad track parameters {params:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_reason = String::new();
    for _ in 0..params.max_attempts.max(1) {
        let ring = control_ring(&mut rng, params);
        let smooth = chaikin_closed(ring, params.smoothing_passes);
        let points = resample_closed(&smooth, params.spacing);
        match TrackSpec::from_closed_points(seed, params.width, points, params.segment_length) {
            Ok(track) => match track.check_clearance() {
                Ok(()) => return Ok(track),
                Err(reason) => last_reason = reason,
            },
            Err(e) => last_reason = e.to_string(),
        }
    }
    Err(Error::TrackGeneration {
        seed,
        attempts: params.max_attempts.max(1),
        reason: last_reason,
    })
}

fn control_ring(rng: &mut ChaCha8Rng, params: &TrackParams) -> Vec<[f64; 2]> {
    let n = params.control_points;
    let step = TAU / n as f64;
    (0..n)
        .map(|k| {
            let jitter = if params.angle_jitter > 0.0 {
                rng.gen_range(-params.angle_jitter..=params.angle_jitter) * step
            } else {
                0.0
            };
            let radius = if params.radius_max > params.radius_min {
                rng.gen_range(params.radius_min..=params.radius_max)
            } else {
                params.radius_min
            };
            let angle = k as f64 * step + jitter;
            [radius * angle.cos(), radius * angle.sin()]
        })
        .collect()
}

fn chaikin_closed(mut pts: Vec<[f64; 2]>, passes: usize) -> Vec<[f64; 2]> {
    for _ in 0..passes {
        let n = pts.len();
        let mut next = Vec::with_capacity(2 * n);
        for i in 0..n {
            let a = pts[i];
            let b = pts[(i + 1) % n];
            next.push([0.75 * a[0] + 0.25 * b[0], 0.75 * a[1] + 0.25 * b[1]]);
            next.push([0.25 * a[0] + 0.75 * b[0], 0.25 * a[1] + 0.75 * b[1]]);
        }
        pts = next;
    }
    pts
}

/// Uniform arc-length resampling of a closed polyline; the output does not
/// repeat its first point.
fn resample_closed(pts: &[[f64; 2]], spacing: f64) -> Vec<[f64; 2]> {
    let n = pts.len();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        cum.push(cum[i] + (b[0] - a[0]).hypot(b[1] - a[1]));
    }
    let total = cum[n];
    let count = ((total / spacing).round() as usize).max(8);
    let ds = total / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut seg = 0;
    for k in 0..count {
        let s = k as f64 * ds;
        while seg + 1 < n && cum[seg + 1] <= s {
            seg += 1;
        }
        let a = pts[seg];
        let b = pts[(seg + 1) % n];
        let len = cum[seg + 1] - cum[seg];
        let u = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
        out.push([a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]);
    }
    out
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    let mut a = a % TAU;
    if a > PI {
        a -= TAU;
    } else if a <= -PI {
        a += TAU;
    }
    a
}

impl TrackSpec {
    /// Builds a track from a closed loop of distinct points (first point not
    /// repeated), computing arc length, curvature and segments, and checking
    /// the track invariants.
    pub fn from_closed_points(
        seed: u64,
        width: f64,
        points: Vec<[f64; 2]>,
        segment_length: f64,
    ) -> Result<Self> {
        let n = points.len();
        if n < 8 {
            return Err(Error::Invalid(format!("closed track needs >= 8 points, got {n}")));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite centerline point".into()));
        }
        let mut arc = Vec::with_capacity(n + 1);
        arc.push(0.0);
        for i in 0..n {
            let a = points[i];
            let b = points[(i + 1) % n];
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            if len <= 0.0 {
                return Err(Error::Invalid(format!("repeated centerline point at {i}")));
            }
            arc.push(arc[i] + len);
        }

        // Central-difference heading, then curvature from heading increments.
        let heading: Vec<f64> = (0..n)
            .map(|i| {
                let a = points[(i + n - 1) % n];
                let b = points[(i + 1) % n];
                (b[1] - a[1]).atan2(b[0] - a[0])
            })
            .collect();
        let raw: Vec<f64> = (0..n)
            .map(|i| {
                let prev = (i + n - 1) % n;
                let next = (i + 1) % n;
                let dtheta = wrap_angle(heading[next] - heading[prev]);
                let ds = arc_between(&arc, prev, next, n);
                dtheta / ds
            })
            .collect();
        let mut curvature: Vec<f64> = (0..n)
            .map(|i| {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += raw[(i + n + k - 2) % n];
                }
                acc / 5.0
            })
            .collect();
        curvature.push(curvature[0]);

        let total = arc[n];
        let n_seg = ((total / segment_length).round() as usize).max(1);
        let seg_len = total / n_seg as f64;
        let mut segment_ids: Vec<usize> = arc[..n]
            .iter()
            .map(|&s| ((s / seg_len) as usize).min(n_seg - 1))
            .collect();
        segment_ids.push(0);
        let mut sums = vec![0.0; n_seg];
        let mut counts = vec![0usize; n_seg];
        for i in 0..n {
            sums[segment_ids[i]] += curvature[i];
            counts[segment_ids[i]] += 1;
        }
        let segment_curvature = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let segment_start = (0..n_seg).map(|k| k as f64 * seg_len).collect();

        let mut centerline = points;
        centerline.push(centerline[0]);
        let track = Self {
            seed,
            width,
            centerline,
            arc_length: arc,
            curvature,
            segment_ids,
            segment_curvature,
            segment_start,
        };
        track.check_invariants().map_err(Error::Invalid)?;
        Ok(track)
    }

    pub fn total_length(&self) -> f64 {
        *self.arc_length.last().unwrap()
    }

    /// Number of centerline segments (stored points minus the closing one).
    pub fn len(&self) -> usize {
        self.centerline.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment_count(&self) -> usize {
        self.segment_curvature.len()
    }

    pub fn segment_curvatures(&self) -> &[f64] {
        &self.segment_curvature
    }

    pub fn start_pose(&self) -> (f64, f64, f64) {
        let p = self.centerline[0];
        (p[0], p[1], self.heading_of_segment(0))
    }

    fn heading_of_segment(&self, i: usize) -> f64 {
        let a = self.centerline[i];
        let b = self.centerline[i + 1];
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Wraps an arc length into `[0, total_length)`.
    pub fn wrap_s(&self, s: f64) -> f64 {
        let total = self.total_length();
        let w = s.rem_euclid(total);
        if w >= total {
            0.0
        } else {
            w
        }
    }

    fn point_index_at(&self, s: f64) -> usize {
        let s = self.wrap_s(s);
        match self
            .arc_length
            .binary_search_by(|v| v.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.len() - 1),
            Err(i) => (i - 1).min(self.len() - 1),
        }
    }

    /// Centerline position and heading at arc length `s`.
    pub fn pose_at(&self, s: f64) -> (f64, f64, f64) {
        let s = self.wrap_s(s);
        let i = self.point_index_at(s);
        let a = self.centerline[i];
        let b = self.centerline[i + 1];
        let u = (s - self.arc_length[i]) / (self.arc_length[i + 1] - self.arc_length[i]);
        (
            a[0] + u * (b[0] - a[0]),
            a[1] + u * (b[1] - a[1]),
            self.heading_of_segment(i),
        )
    }

    /// Interpolated point curvature at arc length `s`.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let s = self.wrap_s(s);
        let i = self.point_index_at(s);
        let u = (s - self.arc_length[i]) / (self.arc_length[i + 1] - self.arc_length[i]);
        self.curvature[i] + u * (self.curvature[i + 1] - self.curvature[i])
    }

    pub fn segment_at(&self, s: f64) -> usize {
        let s = self.wrap_s(s);
        let seg_len = self.total_length() / self.segment_count() as f64;
        ((s / seg_len) as usize).min(self.segment_count() - 1)
    }

    pub fn segment_start(&self, seg: usize) -> f64 {
        self.segment_start[seg % self.segment_count()]
    }

    /// Nearest projection of `p` onto the centerline.
    pub fn localize(&self, p: [f64; 2]) -> Localization {
        let mut best = (f64::INFINITY, 0usize, 0.0f64);
        for i in 0..self.len() {
            let (dist2, u) = project_on_segment(self.centerline[i], self.centerline[i + 1], p);
            if dist2 < best.0 {
                best = (dist2, i, u);
            }
        }
        let (_, i, u) = best;
        let a = self.centerline[i];
        let b = self.centerline[i + 1];
        let (tx, ty) = (b[0] - a[0], b[1] - a[1]);
        let len = tx.hypot(ty);
        let rx = p[0] - a[0];
        let ry = p[1] - a[1];
        let d = (tx * ry - ty * rx) / len;
        let s = self.wrap_s(self.arc_length[i] + u * len);
        Localization {
            s,
            d,
            heading: ty.atan2(tx),
        }
    }

    /// Mean signed curvature of the segment containing `s` followed by the
    /// next `n - 1` segments in driving direction.
    pub fn curvature_profile(&self, s: f64, n: usize) -> Vec<f64> {
        let first = self.segment_at(s);
        let count = self.segment_count();
        (0..n)
            .map(|k| self.segment_curvature[(first + k) % count])
            .collect()
    }

    /// The same track reflected about the x axis.
    pub fn mirrored(&self) -> Result<Self> {
        let pts = self.centerline[..self.len()]
            .iter()
            .map(|p| [p[0], -p[1]])
            .collect();
        let seg_len = self.total_length() / self.segment_count() as f64;
        Self::from_closed_points(self.seed, self.width, pts, seg_len)
    }

    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.len();
        if self.arc_length.len() != n + 1
            || self.curvature.len() != n + 1
            || self.segment_ids.len() != n + 1
        {
            return Err("array lengths differ".into());
        }
        if self.centerline[0] != self.centerline[n] {
            return Err("centerline not closed".into());
        }
        if !(self.width > 0.0) {
            return Err("width must be positive".into());
        }
        if self.arc_length[0] != 0.0 || self.arc_length.windows(2).any(|w| w[1] <= w[0]) {
            return Err("arc length not strictly increasing from 0".into());
        }
        if let Some(i) = self
            .curvature
            .iter()
            .position(|k| !(k.abs() * self.width / 2.0 < 1.0))
        {
            return Err(format!(
                "inner boundary folds at point {i} (curvature {})",
                self.curvature[i]
            ));
        }
        if let Some((i, j)) = first_self_intersection(&self.centerline) {
            return Err(format!("centerline self-intersects (segments {i} and {j})"));
        }
        Ok(())
    }

    /// Rejects layouts where distant parts of the loop come closer than
    /// 1.5 track widths.
    fn check_clearance(&self) -> std::result::Result<(), String> {
        let n = self.len();
        let total = self.total_length();
        let min_gap = 1.5 * self.width;
        let min_arc = 4.0 * self.width;
        for i in 0..n {
            for j in (i + 1)..n {
                let ds = self.arc_length[j] - self.arc_length[i];
                if ds.min(total - ds) < min_arc {
                    continue;
                }
                let a = self.centerline[i];
                let b = self.centerline[j];
                if (a[0] - b[0]).hypot(a[1] - b[1]) < min_gap {
                    return Err(format!("track passes too close to itself (points {i}, {j})"));
                }
            }
        }
        Ok(())
    }
}

fn arc_between(arc: &[f64], from: usize, to: usize, n: usize) -> f64 {
    let total = arc[n];
    let d = arc[to] - arc[from];
    if d <= 0.0 {
        d + total
    } else {
        d
    }
}

/// Squared distance from `p` to segment `ab` and the clamped parameter.
fn project_on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> (f64, f64) {
    let (tx, ty) = (b[0] - a[0], b[1] - a[1]);
    let len2 = tx * tx + ty * ty;
    let u = (((p[0] - a[0]) * tx + (p[1] - a[1]) * ty) / len2).clamp(0.0, 1.0);
    let qx = a[0] + u * tx - p[0];
    let qy = a[1] + u * ty - p[1];
    (qx * qx + qy * qy, u)
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    (o1 * o2 < 0.0) && (o3 * o4 < 0.0)
}

/// Brute-force check over all pairs of non-adjacent segments of a closed
/// polyline whose last point repeats the first.
pub fn first_self_intersection(closed: &[[f64; 2]]) -> Option<(usize, usize)> {
    let n = closed.len() - 1;
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_cross(closed[i], closed[i + 1], closed[j], closed[j + 1]) {
                return Some((i, j));
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackFile {
    schema: String,
    seed: u64,
    width_m: f64,
    s: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    kappa: Vec<f64>,
    segment: Vec<usize>,
}

impl TrackSpec {
    pub fn to_json(&self) -> Result<String> {
        let file = TrackFile {
            schema: TRACK_SCHEMA.into(),
            seed: self.seed,
            width_m: self.width,
            s: self.arc_length.clone(),
            x: self.centerline.iter().map(|p| p[0]).collect(),
            y: self.centerline.iter().map(|p| p[1]).collect(),
            kappa: self.curvature.clone(),
            segment: self.segment_ids.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TrackFile = serde_json::from_str(text)?;
        if file.schema != TRACK_SCHEMA {
            return Err(Error::Invalid(format!(
                "expected schema {TRACK_SCHEMA}, found {}",
                file.schema
            )));
        }
        let n = file.s.len();
        if n < 9
            || [file.x.len(), file.y.len(), file.kappa.len(), file.segment.len()]
                .iter()
                .any(|&l| l != n)
        {
            return Err(Error::Invalid("track arrays differ in length".into()));
        }
        let n_seg = file.segment.iter().copied().max().unwrap_or(0) + 1;
        let total = file.s[n - 1];
        let mut sums = vec![0.0; n_seg];
        let mut counts = vec![0usize; n_seg];
        for i in 0..n - 1 {
            sums[file.segment[i]] += file.kappa[i];
            counts[file.segment[i]] += 1;
        }
        let track = Self {
            seed: file.seed,
            width: file.width_m,
            centerline: file.x.iter().zip(&file.y).map(|(&x, &y)| [x, y]).collect(),
            arc_length: file.s,
            curvature: file.kappa,
            segment_ids: file.segment,
            segment_curvature: sums
                .iter()
                .zip(&counts)
                .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
                .collect(),
            segment_start: (0..n_seg)
                .map(|k| k as f64 * total / n_seg as f64)
                .collect(),
        };
        track.check_invariants().map_err(Error::Invalid)?;
        Ok(track)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_loop() -> TrackSpec {
        // Stadium: two 200 m straights joined by 50 m radius half circles.
        let mut pts = Vec::new();
        for i in 0..200 {
            pts.push([i as f64, 0.0]);
        }
        let arc_pts = (std::f64::consts::PI * 50.0).round() as usize;
        for k in 0..arc_pts {
            let a = -PI / 2.0 + PI * k as f64 / arc_pts as f64;
            pts.push([200.0 + 50.0 * a.cos(), 50.0 + 50.0 * a.sin()]);
        }
        for i in 0..200 {
            pts.push([200.0 - i as f64, 100.0]);
        }
        for k in 0..arc_pts {
            let a = PI / 2.0 + PI * k as f64 / arc_pts as f64;
            pts.push([50.0 * a.cos(), 50.0 + 50.0 * a.sin()]);
        }
        TrackSpec::from_closed_points(0, 10.0, pts, 25.0).unwrap()
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_track(7, &TrackParams::default()).unwrap();
        let b = generate_track(7, &TrackParams::default()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn circle_has_constant_curvature() {
        let t = generate_track(3, &TrackParams::circle(100.0)).unwrap();
        for k in &t.curvature {
            assert!((k - 0.01).abs() < 1e-3, "curvature {k}");
        }
        for k in t.curvature_profile(12.0, 15) {
            assert!((k - 0.01).abs() < 1e-3);
        }
    }

    #[test]
    fn localize_on_and_left_of_centerline() {
        let t = generate_track(11, &TrackParams::default()).unwrap();
        for i in (0..t.len()).step_by(37) {
            let loc = t.localize(t.centerline[i]);
            assert!(loc.d.abs() < 1e-9);
            assert!((loc.s - t.arc_length[i]).abs() < 1e-9);
            let (x, y, th) = t.pose_at(t.arc_length[i] + 0.3);
            let p = [x - 2.0 * th.sin(), y + 2.0 * th.cos()];
            let loc = t.localize(p);
            assert!((loc.d - 2.0).abs() < 1e-6, "d = {}", loc.d);
        }
    }

    #[test]
    fn straight_region_profile_is_zero() {
        let t = straight_loop();
        // Segment 2 lies well inside the first straight.
        let prof = t.curvature_profile(60.0, 4);
        assert!(prof[..3].iter().all(|k| k.abs() < 1e-12), "{prof:?}");
    }

    #[test]
    fn profile_wraps_at_lap_end() {
        let t = generate_track(5, &TrackParams::default()).unwrap();
        let n = t.segment_count();
        let prof = t.curvature_profile(t.total_length() - 1.0, 4);
        let segs = t.segment_curvatures();
        assert_eq!(prof, vec![segs[n - 1], segs[0], segs[1], segs[2]]);
    }

    #[test]
    fn mirrored_track_negates_curvature() {
        let t = generate_track(9, &TrackParams::default()).unwrap();
        let m = t.mirrored().unwrap();
        for (a, b) in t.curvature.iter().zip(&m.curvature) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn rejects_self_intersecting_loop() {
        // Figure-eight.
        let pts: Vec<[f64; 2]> = (0..200)
            .map(|k| {
                let a = TAU * k as f64 / 200.0;
                [100.0 * a.sin(), 50.0 * (2.0 * a).sin()]
            })
            .collect();
        assert!(TrackSpec::from_closed_points(0, 4.0, pts, 25.0).is_err());
    }

    #[test]
    fn schema_tag_checked() {
        let t = generate_track(1, &TrackParams::default()).unwrap();
        let text = t.to_json().unwrap().replace("track/1", "track/9");
        assert!(TrackSpec::from_json(&text).is_err());
    }
}
