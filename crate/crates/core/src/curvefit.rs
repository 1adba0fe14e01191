//! Mask → centerline conversion: blob filtering, per-row waypoint
//! extraction, left/right path splitting and least-squares curve fitting.

use serde::Serialize;
use thiserror::Error;

use crate::mask::MaskImage;
use crate::target::PositionTarget;

#[derive(Debug, Error)]
pub enum CurveFitError {
    #[error("no branch detected: mask produced no waypoints")]
    NoBranchDetected,
    #[error("path has {0} points, need at least 2")]
    InsufficientPoints(usize),
    #[error("unsupported branch count {0}, expected 1 or 2")]
    UnsupportedBranchCount(usize),
}

/// Per-row centers of foreground runs.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointRow {
    pub row: usize,
    /// Ascending horizontal centers, one per maximal run.
    pub centers: Vec<f64>,
}

/// One waypoint assigned to a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub row: usize,
    pub x: f64,
}

/// Curve family used to fit a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    #[default]
    Polynomial,
    CubicSpline,
}

/// Knobs of the mask-to-positions pipeline.
#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
pub struct CurveFitConfig {
    /// Components smaller than this are treated as noise.
    pub min_blob_area: usize,
    /// Requested polynomial order; reduced when points are scarce.
    pub order: usize,
    pub fit: FitKind,
}

impl Default for CurveFitConfig {
    fn default() -> Self {
        Self {
            min_blob_area: 65,
            order: 5,
            fit: FitKind::Polynomial,
        }
    }
}

/// Remove 8-connected components with area below `min_area`.
pub fn blob_filter(mask: &MaskImage, min_area: usize) -> MaskImage {
    let (labels, areas) = connected_components(mask);
    let (w, h) = (mask.width(), mask.height());
    MaskImage::from_fn(w, h, |x, y| {
        let l = labels[y * w + x];
        l != 0 && areas[l as usize] >= min_area
    })
}

/// 8-connectivity component labeling. Returns per-pixel labels (0 =
/// background) and per-label areas (index 0 unused).
pub fn connected_components(mask: &MaskImage) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = vec![0u32; w * h];
    let mut areas = vec![0usize];
    let mut stack = Vec::new();
    let mut next = 1u32;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) || labels[y * w + x] != 0 {
                continue;
            }
            let label = next;
            next += 1;
            let mut area = 0usize;
            labels[y * w + x] = label;
            stack.push((x, y));
            while let Some((cx, cy)) = stack.pop() {
                area += 1;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = cx as i64 + dx;
                        let ny = cy as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if mask.get(nx, ny) && labels[ny * w + nx] == 0 {
                            labels[ny * w + nx] = label;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            areas.push(area);
        }
    }
    (labels, areas)
}

/// Per-row centers of maximal foreground runs; empty rows omitted.
pub fn extract_waypoints(mask: &MaskImage) -> Vec<WaypointRow> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Vec::new();
    for y in 0..h {
        let row = mask.row(y);
        let mut centers = Vec::new();
        let mut run_start: Option<usize> = None;
        for x in 0..=w {
            let fg = x < w && row[x];
            match (fg, run_start) {
                (true, None) => run_start = Some(x),
                (false, Some(s)) => {
                    centers.push((s + x - 1) as f64 / 2.0);
                    run_start = None;
                }
                _ => {}
            }
        }
        if !centers.is_empty() {
            out.push(WaypointRow { row: y, centers });
        }
    }
    out
}

/// Split waypoints into per-branch paths.
///
/// For two branches: rows with several centers send their minimum left and
/// maximum right; below the last multi-center row a single center is the
/// shared trunk and feeds both paths; above it a lone center joins the path
/// whose most recent coordinate is horizontally nearer (ties go left).
pub fn split_left_right(
    waypoints: &[WaypointRow],
    n_branches: usize,
) -> Result<Vec<Vec<PathPoint>>, CurveFitError> {
    if waypoints.is_empty() {
        return Err(CurveFitError::NoBranchDetected);
    }
    match n_branches {
        1 => {
            let mut path = Vec::new();
            let mut last_x: Option<f64> = None;
            for wp in waypoints {
                let x = match last_x {
                    Some(prev) => *wp
                        .centers
                        .iter()
                        .min_by(|a, b| {
                            (*a - prev).abs().partial_cmp(&(*b - prev).abs()).unwrap()
                        })
                        .unwrap(),
                    None => wp.centers[0],
                };
                path.push(PathPoint { row: wp.row, x });
                last_x = Some(x);
            }
            Ok(vec![path])
        }
        2 => {
            let merge_row = waypoints
                .iter()
                .filter(|wp| wp.centers.len() >= 2)
                .map(|wp| wp.row)
                .max();
            let mut left = Vec::new();
            let mut right = Vec::new();
            let mut last_left: Option<f64> = None;
            let mut last_right: Option<f64> = None;
            for wp in waypoints {
                if wp.centers.len() >= 2 {
                    let lo = *wp.centers.first().unwrap();
                    let hi = *wp.centers.last().unwrap();
                    left.push(PathPoint { row: wp.row, x: lo });
                    right.push(PathPoint { row: wp.row, x: hi });
                    last_left = Some(lo);
                    last_right = Some(hi);
                } else {
                    let x = wp.centers[0];
                    let below_merge = merge_row.map_or(true, |m| wp.row > m);
                    if below_merge {
                        left.push(PathPoint { row: wp.row, x });
                        right.push(PathPoint { row: wp.row, x });
                        last_left = Some(x);
                        last_right = Some(x);
                    } else {
                        let dl = last_left.map_or(f64::INFINITY, |p| (p - x).abs());
                        let dr = last_right.map_or(f64::INFINITY, |p| (p - x).abs());
                        if dl <= dr {
                            left.push(PathPoint { row: wp.row, x });
                            last_left = Some(x);
                        } else {
                            right.push(PathPoint { row: wp.row, x });
                            last_right = Some(x);
                        }
                    }
                }
            }
            Ok(vec![left, right])
        }
        n => Err(CurveFitError::UnsupportedBranchCount(n)),
    }
}

/// A fitted curve `x = f(row)` over a row domain mapped affinely to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub enum CurveModel {
    Poly(PolyCurve),
    Spline(CubicSpline),
}

impl CurveModel {
    pub fn eval(&self, row: f64) -> f64 {
        match self {
            CurveModel::Poly(p) => p.eval(row),
            CurveModel::Spline(s) => s.eval(row),
        }
    }

    pub fn residual_rms(&self) -> f64 {
        match self {
            CurveModel::Poly(p) => p.residual_rms,
            CurveModel::Spline(_) => 0.0,
        }
    }

    pub fn order(&self) -> usize {
        match self {
            CurveModel::Poly(p) => p.order,
            CurveModel::Spline(s) => s.rows.len().saturating_sub(1).max(1) * 3,
        }
    }
}

/// Polynomial in the normalized row coordinate ŷ ∈ [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PolyCurve {
    /// a_0..a_k of x = Σ a_j ŷ^j.
    pub coeffs: Vec<f64>,
    pub order: usize,
    /// Row range mapped to [-1, 1].
    pub domain: (f64, f64),
    pub residual_rms: f64,
}

impl PolyCurve {
    fn normalize(&self, row: f64) -> f64 {
        let (lo, hi) = self.domain;
        if hi > lo {
            2.0 * (row - lo) / (hi - lo) - 1.0
        } else {
            0.0
        }
    }

    pub fn eval(&self, row: f64) -> f64 {
        let t = self.normalize(row);
        // Horner over ascending coefficients.
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
    }
}

/// Least-squares polynomial fit of a path, solved by Householder QR on the
/// Vandermonde matrix of the normalized row coordinate. The order drops to
/// `points - 1` when the path is short.
pub fn fit_polynomial(path: &[PathPoint], order: usize) -> Result<PolyCurve, CurveFitError> {
    if path.len() < 2 {
        return Err(CurveFitError::InsufficientPoints(path.len()));
    }
    let order = order.max(1).min(path.len() - 1);
    let lo = path.iter().map(|p| p.row).min().unwrap() as f64;
    let hi = path.iter().map(|p| p.row).max().unwrap() as f64;
    let m = path.len();
    let n = order + 1;
    let norm = |row: f64| {
        if hi > lo {
            2.0 * (row - lo) / (hi - lo) - 1.0
        } else {
            0.0
        }
    };
    let mut a = vec![0.0f64; m * n];
    let mut b = vec![0.0f64; m];
    for (i, p) in path.iter().enumerate() {
        let t = norm(p.row as f64);
        let mut pw = 1.0;
        for j in 0..n {
            a[i * n + j] = pw;
            pw *= t;
        }
        b[i] = p.x;
    }
    let coeffs = householder_lstsq(&mut a, &mut b, m, n);
    let curve = PolyCurve {
        coeffs,
        order,
        domain: (lo, hi),
        residual_rms: 0.0,
    };
    let ss: f64 = path
        .iter()
        .map(|p| (p.x - curve.eval(p.row as f64)).powi(2))
        .sum();
    Ok(PolyCurve {
        residual_rms: (ss / m as f64).sqrt(),
        ..curve
    })
}

/// Minimum-residual solution of the dense system `A x = b` (row-major A,
/// m >= n) via Householder reflections and back substitution.
fn householder_lstsq(a: &mut [f64], b: &mut [f64], m: usize, n: usize) -> Vec<f64> {
    for k in 0..n {
        let mut norm2 = 0.0;
        for i in k..m {
            norm2 += a[i * n + k] * a[i * n + k];
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[k * n + k] > 0.0 { -norm } else { norm };
        let mut v = vec![0.0; m - k];
        v[0] = a[k * n + k] - alpha;
        for i in k + 1..m {
            v[i - k] = a[i * n + k];
        }
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // Apply H = I - 2 v vᵀ / vᵀv to the trailing columns and to b.
        for j in k..n {
            let mut dot = 0.0;
            for i in k..m {
                dot += v[i - k] * a[i * n + j];
            }
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                a[i * n + j] -= f * v[i - k];
            }
        }
        let mut dot = 0.0;
        for i in k..m {
            dot += v[i - k] * b[i];
        }
        let f = 2.0 * dot / vnorm2;
        for i in k..m {
            b[i] -= f * v[i - k];
        }
        a[k * n + k] = alpha;
        for i in k + 1..m {
            a[i * n + k] = 0.0;
        }
    }
    // Back substitution on the upper-triangular factor.
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let mut s = b[k];
        for j in k + 1..n {
            s -= a[k * n + j] * x[j];
        }
        let d = a[k * n + k];
        x[k] = if d.abs() > 1e-300 { s / d } else { 0.0 };
    }
    x
}

/// Natural cubic spline interpolation through a path (one knot per row).
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    rows: Vec<f64>,
    xs: Vec<f64>,
    // Second derivatives at the knots.
    m2: Vec<f64>,
}

pub fn fit_spline(path: &[PathPoint]) -> Result<CubicSpline, CurveFitError> {
    if path.len() < 2 {
        return Err(CurveFitError::InsufficientPoints(path.len()));
    }
    let rows: Vec<f64> = path.iter().map(|p| p.row as f64).collect();
    let xs: Vec<f64> = path.iter().map(|p| p.x).collect();
    let n = rows.len();
    let mut m2 = vec![0.0; n];
    if n > 2 {
        // Thomas algorithm on the natural-spline tridiagonal system.
        let mut sub = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut sup = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for i in 1..n - 1 {
            let h0 = rows[i] - rows[i - 1];
            let h1 = rows[i + 1] - rows[i];
            sub[i] = h0;
            diag[i] = 2.0 * (h0 + h1);
            sup[i] = h1;
            rhs[i] = 6.0 * ((xs[i + 1] - xs[i]) / h1 - (xs[i] - xs[i - 1]) / h0);
        }
        for i in 2..n - 1 {
            let f = sub[i] / diag[i - 1];
            diag[i] -= f * sup[i - 1];
            rhs[i] -= f * rhs[i - 1];
        }
        for i in (1..n - 1).rev() {
            let upper = if i + 1 < n - 1 { sup[i] * m2[i + 1] } else { 0.0 };
            m2[i] = (rhs[i] - upper) / diag[i];
        }
    }
    Ok(CubicSpline { rows, xs, m2 })
}

impl CubicSpline {
    pub fn eval(&self, row: f64) -> f64 {
        let n = self.rows.len();
        let row = row.clamp(self.rows[0], self.rows[n - 1]);
        let mut i = match self
            .rows
            .binary_search_by(|r| r.partial_cmp(&row).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if i >= n - 1 {
            i = n - 2;
        }
        let h = self.rows[i + 1] - self.rows[i];
        let a = (self.rows[i + 1] - row) / h;
        let b = (row - self.rows[i]) / h;
        a * self.xs[i]
            + b * self.xs[i + 1]
            + ((a.powi(3) - a) * self.m2[i] + (b.powi(3) - b) * self.m2[i + 1]) * h * h / 6.0
    }
}

/// Per-path fit diagnostics for the pipeline report.
#[derive(Debug, Clone, Serialize)]
pub struct PathDiag {
    pub branch: usize,
    pub waypoints: usize,
    pub effective_order: usize,
    pub residual_rms: f64,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostics {
    pub removed_blobs: usize,
    pub kept_blobs: usize,
    pub gap_rows: usize,
    pub paths: Vec<PathDiag>,
}

/// Full pipeline: blob filter → waypoints → path split → per-path curve fit
/// → per-row evaluation over each path's waypoint span.
pub fn mask_to_positions(
    mask: &MaskImage,
    n_branches: usize,
    height: usize,
) -> Result<PositionTarget, CurveFitError> {
    mask_to_positions_with(mask, n_branches, height, &CurveFitConfig::default()).map(|(t, _)| t)
}

pub fn mask_to_positions_with(
    mask: &MaskImage,
    n_branches: usize,
    height: usize,
    cfg: &CurveFitConfig,
) -> Result<(PositionTarget, FitDiagnostics), CurveFitError> {
    let (_, areas) = connected_components(mask);
    let removed = areas
        .iter()
        .skip(1)
        .filter(|&&a| a < cfg.min_blob_area)
        .count();
    let kept = areas.len() - 1 - removed;
    let filtered = blob_filter(mask, cfg.min_blob_area);
    let waypoints = extract_waypoints(&filtered);
    let paths = split_left_right(&waypoints, n_branches)?;
    if paths.iter().any(|p| p.is_empty()) {
        return Err(CurveFitError::NoBranchDetected);
    }

    let width = mask.width();
    let hi = (width - 1) as f64;
    let mut target = PositionTarget::new(n_branches, width, height);
    let mut diags = Vec::new();
    let mut curves = Vec::new();
    let mut spans = Vec::new();
    for (b, path) in paths.iter().enumerate() {
        let curve = match cfg.fit {
            FitKind::Polynomial => CurveModel::Poly(fit_polynomial(path, cfg.order)?),
            FitKind::CubicSpline => CurveModel::Spline(fit_spline(path)?),
        };
        let lo = path.first().unwrap().row;
        let hi_row = path.last().unwrap().row.min(height.saturating_sub(1));
        diags.push(PathDiag {
            branch: b,
            waypoints: path.len(),
            effective_order: curve.order(),
            residual_rms: curve.residual_rms(),
            span: (lo, hi_row),
        });
        spans.push((lo, hi_row));
        curves.push(curve);
    }

    // Valid rows: union of the path spans. A channel whose span misses a
    // valid row takes its nearest in-span evaluation (constant extension).
    for r in 0..height {
        let in_any = spans.iter().any(|&(lo, hi_row)| r >= lo && r <= hi_row);
        if !in_any {
            continue;
        }
        target.valid[r] = true;
        for (b, curve) in curves.iter().enumerate() {
            let (lo, hi_row) = spans[b];
            let eval_row = (r.clamp(lo, hi_row)) as f64;
            target.coords[b][r] = curve.eval(eval_row).clamp(0.0, hi);
        }
    }
    // For n=2, keep the left channel left of the right channel above the
    // merge only by construction of the split; no reordering here.
    let gap_rows = height - target.n_valid();
    Ok((
        target,
        FitDiagnostics {
            removed_blobs: removed,
            kept_blobs: kept,
            gap_rows,
            paths: diags,
        },
    ))
}
