//! Arc-length-parameterized track centerlines, Frenet projection, and
//! centerline yaw-rate features.

use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;
use crate::error::{Error, Result};
use crate::math::wrap_angle;

pub const TRACK_FORMAT_VERSION: &str = "switchpol-track-v1";

/// Segment of a track description file. Clothoids are approximated internally
/// by short constant-curvature arcs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "type", rename_all = "kebab-case")]
pub enum TrackSegment {
    Line { length: f64 },
    Arc { length: f64, curvature: f64 },
    Clothoid { length: f64, curvature_start: f64, curvature_end: f64 },
}

/// Road-relative pose: arc length, signed lateral offset (positive left of
/// the travel direction), and heading error wrapped to (−π, π].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrenetState {
    pub sigma: f64,
    pub d_lat: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Piece {
    sigma0: f64,
    length: f64,
    kappa: f64,
    x0: f64,
    y0: f64,
    h0: f64,
}

impl Piece {
    fn pose_at(&self, s: f64) -> (f64, f64, f64) {
        if self.kappa.abs() < 1e-15 {
            (self.x0 + s * self.h0.cos(), self.y0 + s * self.h0.sin(), self.h0)
        } else {
            let h = self.h0 + self.kappa * s;
            (
                self.x0 + (h.sin() - self.h0.sin()) / self.kappa,
                self.y0 - (h.cos() - self.h0.cos()) / self.kappa,
                h,
            )
        }
    }
}

/// Centerline built from piecewise-constant-curvature pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackGeometry {
    pieces: Vec<Piece>,
    pub lane_width: f64,
    sigma_max: f64,
    /// Coarse-grid step used by the nearest-point search (m).
    pub grid_step: f64,
    /// Projections farther than this from the centerline are rejected (m).
    pub corridor_half_width: f64,
}

/// Maximum sub-arc length used when flattening a clothoid ramp.
const CLOTHOID_SUBARC_LEN: f64 = 1.0;

impl TrackGeometry {
    pub fn from_segments(segments: &[TrackSegment], lane_width: f64) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidArgument("track needs at least one segment".into()));
        }
        if !(lane_width > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lane width must be positive, got {lane_width}"
            )));
        }
        let mut pieces = Vec::new();
        let (mut x, mut y, mut h, mut sigma) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut push = |x: &mut f64, y: &mut f64, h: &mut f64, sigma: &mut f64, len: f64, kappa: f64| {
            let piece = Piece { sigma0: *sigma, length: len, kappa, x0: *x, y0: *y, h0: *h };
            let (nx, ny, nh) = piece.pose_at(len);
            *x = nx;
            *y = ny;
            *h = nh;
            *sigma += len;
            pieces.push(piece);
        };
        for (i, seg) in segments.iter().enumerate() {
            match *seg {
                TrackSegment::Line { length } => {
                    if !(length > 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "segment {i}: length must be positive"
                        )));
                    }
                    push(&mut x, &mut y, &mut h, &mut sigma, length, 0.0);
                }
                TrackSegment::Arc { length, curvature } => {
                    if !(length > 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "segment {i}: length must be positive"
                        )));
                    }
                    push(&mut x, &mut y, &mut h, &mut sigma, length, curvature);
                }
                TrackSegment::Clothoid { length, curvature_start, curvature_end } => {
                    if !(length > 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "segment {i}: length must be positive"
                        )));
                    }
                    let n_sub = (length / CLOTHOID_SUBARC_LEN).ceil().max(1.0) as usize;
                    let sub_len = length / n_sub as f64;
                    for k in 0..n_sub {
                        // Midpoint curvature of each sub-arc.
                        let frac = (k as f64 + 0.5) / n_sub as f64;
                        let kappa = curvature_start + frac * (curvature_end - curvature_start);
                        push(&mut x, &mut y, &mut h, &mut sigma, sub_len, kappa);
                    }
                }
            }
        }
        Ok(TrackGeometry {
            pieces,
            lane_width,
            sigma_max: sigma,
            grid_step: 0.5,
            corridor_half_width: 10.0,
        })
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    fn piece_at(&self, sigma: f64) -> &Piece {
        // Left-closed pieces: a junction arc length belongs to the piece that
        // starts there.
        let idx = self
            .pieces
            .partition_point(|p| p.sigma0 + p.length <= sigma)
            .min(self.pieces.len() - 1);
        &self.pieces[idx]
    }

    fn check_sigma(&self, sigma: f64) -> Result<f64> {
        if sigma < -1e-9 || sigma > self.sigma_max + 1e-9 {
            return Err(Error::Geometry(format!(
                "arc length {sigma} outside [0, {}]",
                self.sigma_max
            )));
        }
        Ok(sigma.clamp(0.0, self.sigma_max))
    }

    /// Centerline position at arc length `sigma`.
    pub fn position(&self, sigma: f64) -> Result<(f64, f64)> {
        let sigma = self.check_sigma(sigma)?;
        let p = self.piece_at(sigma);
        let (x, y, _) = p.pose_at(sigma - p.sigma0);
        Ok((x, y))
    }

    /// Centerline heading at arc length `sigma`.
    pub fn heading(&self, sigma: f64) -> Result<f64> {
        let sigma = self.check_sigma(sigma)?;
        let p = self.piece_at(sigma);
        let (_, _, h) = p.pose_at(sigma - p.sigma0);
        Ok(h)
    }

    /// Signed curvature at arc length `sigma`.
    pub fn curvature(&self, sigma: f64) -> Result<f64> {
        let sigma = self.check_sigma(sigma)?;
        Ok(self.piece_at(sigma).kappa)
    }

    /// World position of the road-relative pose `(sigma, d_lat)`.
    pub fn world_from_frenet(&self, sigma: f64, d_lat: f64) -> Result<(f64, f64)> {
        let (cx, cy) = self.position(sigma)?;
        let h = self.heading(sigma)?;
        Ok((cx - d_lat * h.sin(), cy + d_lat * h.cos()))
    }

    /// Derivative of the squared distance from `p` to the centerline,
    /// halved: `(c(σ) − p)·t(σ)`. Vanishes at the nearest point.
    fn proj_derivative(&self, sigma: f64, px: f64, py: f64) -> f64 {
        let piece = self.piece_at(sigma.clamp(0.0, self.sigma_max));
        let (cx, cy, h) = piece.pose_at(sigma.clamp(0.0, self.sigma_max) - piece.sigma0);
        (cx - px) * h.cos() + (cy - py) * h.sin()
    }

    fn distance2(&self, sigma: f64, px: f64, py: f64) -> f64 {
        let piece = self.piece_at(sigma);
        let (cx, cy, _) = piece.pose_at(sigma - piece.sigma0);
        (cx - px).powi(2) + (cy - py).powi(2)
    }

    /// Arc length of the nearest centerline point. Coarse grid scan followed
    /// by safeguarded Newton on the projection derivative.
    pub fn project(&self, px: f64, py: f64) -> Result<f64> {
        self.project_impl(px, py, None)
    }

    /// Like [`project`](Self::project) but restricted to a window around a
    /// previous arc length, for incremental queries along a trajectory.
    pub fn project_hinted(&self, px: f64, py: f64, hint: f64, window: f64) -> Result<f64> {
        self.project_impl(px, py, Some((hint, window)))
    }

    fn project_impl(&self, px: f64, py: f64, hint: Option<(f64, f64)>) -> Result<f64> {
        let (lo, hi) = match hint {
            Some((h, w)) => ((h - w).max(0.0), (h + w).min(self.sigma_max)),
            None => (0.0, self.sigma_max),
        };
        let span = hi - lo;
        if span <= 0.0 {
            return Err(Error::Geometry("empty projection window".into()));
        }
        let n = ((span / self.grid_step).ceil() as usize).clamp(2, 2_000_000);
        let mut best_k = 0usize;
        let mut best_d2 = f64::INFINITY;
        let mut grid = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let s = lo + span * (k as f64) / (n as f64);
            let d2 = self.distance2(s, px, py);
            grid.push(d2);
            if d2 < best_d2 {
                best_d2 = d2;
                best_k = k;
            }
        }
        // Ambiguity check: a comparably close minimum far from the best one
        // means the projection is not unique.
        if hint.is_none() {
            let sep = (5.0 * self.grid_step / (span / n as f64)).ceil() as usize;
            let tie_tol = 1e-6 * (1.0 + best_d2);
            for (k, d2) in grid.iter().enumerate() {
                if k + sep < best_k || k > best_k + sep {
                    if (d2 - best_d2).abs() < tie_tol {
                        return Err(Error::Geometry(format!(
                            "ambiguous projection: ties at arc lengths {:.3} and {:.3}",
                            lo + span * best_k as f64 / n as f64,
                            lo + span * k as f64 / n as f64
                        )));
                    }
                }
            }
        }
        let step = span / n as f64;
        let s_best = lo + step * best_k as f64;
        let mut a = (s_best - step).max(0.0);
        let mut b = (s_best + step).min(self.sigma_max);

        // Safeguarded Newton on φ(σ) = (c − p)·t, bisection fallback.
        let mut fa = self.proj_derivative(a, px, py);
        let fb = self.proj_derivative(b, px, py);
        let mut s = s_best;
        if fa.signum() == fb.signum() {
            // Minimum sits at the boundary of the window (or the track end).
            s = if self.distance2(a, px, py) < self.distance2(b, px, py) { a } else { b };
        } else {
            for _ in 0..100 {
                let fs = self.proj_derivative(s, px, py);
                if fs.abs() < 1e-13 || (b - a) < 1e-13 {
                    break;
                }
                if fs.signum() == fa.signum() {
                    a = s;
                    fa = fs;
                } else {
                    b = s;
                }
                // Numeric slope of φ over the bracket.
                let h = 1e-6_f64.max((b - a) * 1e-3);
                let dphi = (self.proj_derivative(s + h, px, py)
                    - self.proj_derivative(s - h, px, py))
                    / (2.0 * h);
                let newton = s - fs / dphi;
                s = if dphi.abs() > 1e-14 && newton > a && newton < b {
                    newton
                } else {
                    0.5 * (a + b)
                };
            }
        }
        let d2 = self.distance2(s, px, py);
        if d2.sqrt() > self.corridor_half_width {
            return Err(Error::Geometry(format!(
                "point ({px:.2}, {py:.2}) is {:.2} m from the centerline, outside the \
                 {:.2} m corridor",
                d2.sqrt(),
                self.corridor_half_width
            )));
        }
        Ok(s)
    }

    /// Frenet pose of a vehicle state.
    pub fn to_frenet(&self, state: &VehicleState) -> Result<FrenetState> {
        let sigma = self.project(state.p_x, state.p_y)?;
        self.frenet_at(state, sigma)
    }

    /// Frenet pose given an already-projected arc length.
    pub fn frenet_at(&self, state: &VehicleState, sigma: f64) -> Result<FrenetState> {
        let (cx, cy) = self.position(sigma)?;
        let h = self.heading(sigma)?;
        // Left normal of the travel direction.
        let d_lat = -(state.p_x - cx) * h.sin() + (state.p_y - cy) * h.cos();
        Ok(FrenetState { sigma, d_lat, phi: wrap_angle(state.psi - h) })
    }

    /// Centerline yaw-rate features: for each lookahead `ℓ`, the pair
    /// `(κ(σ+ℓ)·v_x, |κ(σ+ℓ)·v_x|)`, concatenated in lookahead order.
    ///
    /// `clamp_end` clamps `σ+ℓ` to the track end instead of erroring.
    pub fn centerline_yaw_rates(
        &self,
        state: &VehicleState,
        lookaheads: &[f64],
        clamp_end: bool,
    ) -> Result<Vec<f64>> {
        let sigma = self.project(state.p_x, state.p_y)?;
        self.centerline_yaw_rates_at(sigma, state.v_x, lookaheads, clamp_end)
    }

    pub fn centerline_yaw_rates_at(
        &self,
        sigma: f64,
        v_x: f64,
        lookaheads: &[f64],
        clamp_end: bool,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(2 * lookaheads.len());
        for &l in lookaheads {
            let mut s = sigma + l;
            if s > self.sigma_max {
                if clamp_end {
                    s = self.sigma_max;
                } else {
                    return Err(Error::Geometry(format!(
                        "lookahead {l} m past the track end (σ={sigma:.2}, σ_max={:.2})",
                        self.sigma_max
                    )));
                }
            }
            let w = self.curvature(s)? * v_x;
            out.push(w);
            out.push(w.abs());
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Track file I/O
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackFile {
    pub version: String,
    pub lane_width: f64,
    pub segments: Vec<TrackSegment>,
}

impl TrackFile {
    pub fn to_geometry(&self) -> Result<TrackGeometry> {
        if self.version != TRACK_FORMAT_VERSION {
            return Err(Error::Parse {
                path: "<track json>".into(),
                detail: format!(
                    "unsupported version {:?}, expected {TRACK_FORMAT_VERSION:?}",
                    self.version
                ),
            });
        }
        TrackGeometry::from_segments(&self.segments, self.lane_width)
    }

    pub fn new(segments: Vec<TrackSegment>, lane_width: f64) -> Self {
        TrackFile { version: TRACK_FORMAT_VERSION.to_string(), lane_width, segments }
    }
}

pub fn read_track(path: &std::path::Path) -> Result<(TrackFile, TrackGeometry)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })?;
    let file: TrackFile = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })?;
    let geom = file.to_geometry()?;
    Ok((file, geom))
}

pub fn write_track(file: &TrackFile, path: &std::path::Path) -> Result<()> {
    let text = serde_json::to_string_pretty(file).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn straight(len: f64) -> TrackGeometry {
        TrackGeometry::from_segments(&[TrackSegment::Line { length: len }], 4.5).unwrap()
    }

    fn state_at(p_x: f64, p_y: f64, psi: f64) -> VehicleState {
        VehicleState { p_x, p_y, psi, v_x: 10.0, v_y: 0.0, omega: 0.0 }
    }

    #[test]
    fn straight_track_geometry() {
        let t = straight(100.0);
        let f = t.to_frenet(&state_at(5.0, 1.0, 0.1)).unwrap();
        assert_abs_diff_eq!(f.sigma, 5.0, epsilon = 1e-9);
        assert_abs_diff_eq!(f.d_lat, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(f.phi, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn on_centerline_aligned() {
        let t = TrackGeometry::from_segments(
            &[
                TrackSegment::Line { length: 20.0 },
                TrackSegment::Arc { length: 30.0, curvature: 0.05 },
            ],
            4.5,
        )
        .unwrap();
        let sigma = 27.0;
        let (x, y) = t.position(sigma).unwrap();
        let h = t.heading(sigma).unwrap();
        let f = t.to_frenet(&state_at(x, y, h)).unwrap();
        assert_abs_diff_eq!(f.sigma, sigma, epsilon = 1e-9);
        assert_abs_diff_eq!(f.d_lat, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(f.phi, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn circle_arc_matches_analytic_projection() {
        // Left-turning circle of radius 50 starting at the origin heading +X;
        // center at (0, 50).
        let r = 50.0;
        let t = TrackGeometry::from_segments(
            &[TrackSegment::Arc { length: 1.5 * std::f64::consts::PI * r, curvature: 1.0 / r }],
            4.5,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let sigma_true = rng.gen_range(5.0..t.sigma_max() - 5.0);
            let d_true = rng.gen_range(-2.0..2.0);
            let (px, py) = t.world_from_frenet(sigma_true, d_true).unwrap();
            // Analytic circle projection oracle.
            let (ox, oy) = (0.0, r);
            let dist_center = ((px - ox).powi(2) + (py - oy).powi(2)).sqrt();
            let d_analytic = r - dist_center;
            let ang = (px - ox).atan2(-(py - oy)); // angle from the start point
            let sigma_analytic = r * if ang < 0.0 { ang + std::f64::consts::TAU } else { ang };
            let f = t.to_frenet(&state_at(px, py, 0.0)).unwrap();
            assert_abs_diff_eq!(f.sigma, sigma_analytic, epsilon = 1e-9 * (1.0 + sigma_analytic));
            assert_abs_diff_eq!(f.d_lat, d_analytic, epsilon = 1e-9);
        }
    }

    #[test]
    fn frenet_world_round_trip() {
        let t = TrackGeometry::from_segments(
            &[
                TrackSegment::Line { length: 30.0 },
                TrackSegment::Clothoid { length: 15.0, curvature_start: 0.0, curvature_end: 0.04 },
                TrackSegment::Arc { length: 40.0, curvature: 0.04 },
                TrackSegment::Clothoid { length: 15.0, curvature_start: 0.04, curvature_end: -0.02 },
                TrackSegment::Arc { length: 25.0, curvature: -0.02 },
            ],
            4.5,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let sigma = rng.gen_range(1.0..t.sigma_max() - 1.0);
            let d = rng.gen_range(-3.0..3.0);
            let (px, py) = t.world_from_frenet(sigma, d).unwrap();
            let f = t.to_frenet(&state_at(px, py, 0.3)).unwrap();
            let (bx, by) = t.world_from_frenet(f.sigma, f.d_lat).unwrap();
            assert_abs_diff_eq!(bx, px, epsilon = 1e-9);
            assert_abs_diff_eq!(by, py, epsilon = 1e-9);
        }
    }

    #[test]
    fn projection_ambiguity_detected() {
        // Three-quarter circle: a point near the center is equidistant from
        // many centerline points.
        let r = 20.0;
        let t = TrackGeometry::from_segments(
            &[TrackSegment::Arc { length: 1.5 * std::f64::consts::PI * r, curvature: 1.0 / r }],
            4.5,
        )
        .unwrap();
        match t.to_frenet(&state_at(0.0, r, 0.0)) {
            Err(Error::Geometry(_)) => {}
            other => panic!("expected geometry error, got {other:?}"),
        }
    }

    #[test]
    fn corridor_violation_detected() {
        let t = straight(100.0);
        assert!(matches!(t.to_frenet(&state_at(50.0, 30.0, 0.0)), Err(Error::Geometry(_))));
    }

    #[test]
    fn yaw_rates_straight_track_zero() {
        let t = straight(100.0);
        let feats = t
            .centerline_yaw_rates(&state_at(5.0, 0.0, 0.0), &[0.0, 1.0, 2.0, 3.0], false)
            .unwrap();
        assert_eq!(feats.len(), 8);
        assert!(feats.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn yaw_rates_constant_curvature() {
        let t = TrackGeometry::from_segments(
            &[TrackSegment::Arc { length: 200.0, curvature: 0.02 }],
            4.5,
        )
        .unwrap();
        let (px, py) = t.position(20.0).unwrap();
        let h = t.heading(20.0).unwrap();
        let feats = t
            .centerline_yaw_rates(&state_at(px, py, h), &[0.0, 1.0, 2.0, 3.0], false)
            .unwrap();
        for pair in feats.chunks(2) {
            assert_abs_diff_eq!(pair[0], 0.2, epsilon = 1e-9);
            assert_abs_diff_eq!(pair[1], 0.2, epsilon = 1e-9);
        }
    }

    #[test]
    fn yaw_rates_piecewise_table_lookup() {
        let t = TrackGeometry::from_segments(
            &[
                TrackSegment::Line { length: 10.0 },
                TrackSegment::Arc { length: 10.0, curvature: 0.03 },
                TrackSegment::Arc { length: 10.0, curvature: -0.01 },
            ],
            4.5,
        )
        .unwrap();
        let sigma = 8.0;
        let v_x = 10.0;
        let feats = t.centerline_yaw_rates_at(sigma, v_x, &[0.0, 1.0, 2.0, 3.0, 13.0], false).unwrap();
        // Manual table: κ(8)=0, κ(9)=0, κ(10..20)=0.03, κ(21)=0.03.
        let expect_kappa = [0.0, 0.0, 0.03, 0.03, -0.01];
        for (i, &k) in expect_kappa.iter().enumerate() {
            assert_abs_diff_eq!(feats[2 * i], k * v_x, epsilon = 1e-12);
            assert_abs_diff_eq!(feats[2 * i + 1], (k * v_x).abs(), epsilon = 1e-12);
        }
    }

    #[test]
    fn yaw_rates_past_end_error_or_clamp() {
        let t = straight(10.0);
        let s = state_at(9.5, 0.0, 0.0);
        assert!(t.centerline_yaw_rates(&s, &[0.0, 3.0], false).is_err());
        let feats = t.centerline_yaw_rates(&s, &[0.0, 3.0], true).unwrap();
        assert_eq!(feats.len(), 4);
    }

    #[test]
    fn track_file_round_trip() {
        let file = TrackFile::new(
            vec![
                TrackSegment::Line { length: 12.0 },
                TrackSegment::Clothoid { length: 5.0, curvature_start: 0.0, curvature_end: 0.02 },
            ],
            4.5,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.json");
        write_track(&file, &path).unwrap();
        let (back, geom) = read_track(&path).unwrap();
        assert_eq!(file.segments, back.segments);
        assert_abs_diff_eq!(geom.sigma_max(), 17.0, epsilon = 1e-12);
    }

    #[test]
    fn hinted_projection_matches_full() {
        let t = TrackGeometry::from_segments(
            &[
                TrackSegment::Line { length: 50.0 },
                TrackSegment::Arc { length: 60.0, curvature: 0.02 },
            ],
            4.5,
        )
        .unwrap();
        let (px, py) = t.world_from_frenet(70.0, 1.2).unwrap();
        let full = t.project(px, py).unwrap();
        let hinted = t.project_hinted(px, py, 69.0, 5.0).unwrap();
        assert_abs_diff_eq!(full, hinted, epsilon = 1e-9);
    }
}
