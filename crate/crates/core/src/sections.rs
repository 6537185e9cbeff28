//! Stroboscopic (constant drive phase) sections: sampling at `t = 2πn`,
//! CSV emission and parsing, and coarse occupancy grids for comparing
//! attractors.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{QsdError, Result};
use crate::fockspace::MomentSet;
use crate::models::{classical_step, ClassicalState, DuffingParams};
use crate::trajectory::{NoiseStream, Propagator, Sampler, StepInfo};

/// Cells per axis of an occupancy grid.
pub const GRID_SIZE: usize = 32;

const PHASE_TOL: f64 = 1e-9;

/// One point of a section, in scaled coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionPoint {
    pub n: u64,
    pub x: f64,
    pub p: f64,
}

/// What a section point is read from.
#[derive(Clone, Copy, Debug)]
pub enum SectionSource<'a> {
    Classical(&'a ClassicalState),
    /// Unscaled quantum (or linearized) moments at time `t`.
    Quantum { moments: &'a MomentSet, t: f64 },
}

/// Period index of `t`, or a configuration error if `t` is not a multiple
/// of `2π`.
pub fn period_index(t: f64) -> Result<u64> {
    let r = t / TAU;
    let n = r.round();
    if n < 0.0 || (r - n).abs() > PHASE_TOL * r.abs().max(1.0) {
        return Err(QsdError::Config(format!(
            "section sample at t = {t} is not a multiple of 2π"
        )));
    }
    Ok(n as u64)
}

/// Classical points are taken verbatim; quantum points are scaled to
/// `(β⟨Q̂⟩, β⟨P̂⟩)` so every β shares the classical coordinate frame.
pub fn sample_point(source: SectionSource<'_>, beta: f64) -> Result<SectionPoint> {
    match source {
        SectionSource::Classical(s) => Ok(SectionPoint {
            n: period_index(s.t)?,
            x: s.x,
            p: s.p,
        }),
        SectionSource::Quantum { moments, t } => Ok(SectionPoint {
            n: period_index(t)?,
            x: beta * moments.q_mean,
            p: beta * moments.p_mean,
        }),
    }
}

/// Collects one scaled point per drive period.
#[derive(Clone, Debug)]
pub struct SectionSampler {
    scale: f64,
    points: Vec<SectionPoint>,
}

impl SectionSampler {
    /// `scale` multiplies the propagator's moments: β for quantum and
    /// linearized runs, 1 for classical ones.
    pub fn new(scale: f64) -> Self {
        SectionSampler {
            scale,
            points: Vec::new(),
        }
    }

    pub fn points(&self) -> &[SectionPoint] {
        &self.points
    }

    pub fn into_points(self) -> Vec<SectionPoint> {
        self.points
    }
}

impl Sampler for SectionSampler {
    fn interval(&self) -> f64 {
        TAU
    }

    fn sample(&mut self, index: u64, t: f64, moments: &MomentSet) -> Result<()> {
        let n = period_index(t)?;
        debug_assert_eq!(n, index);
        self.points.push(SectionPoint {
            n,
            x: self.scale * moments.q_mean,
            p: self.scale * moments.p_mean,
        });
        Ok(())
    }
}

/// The classical equation of motion as a [`Propagator`]. It ignores the
/// noise stream and reports `(x, p)` as means with zero variances.
pub struct ClassicalPropagator {
    params: DuffingParams,
    state: ClassicalState,
    t0: f64,
    steps: u64,
}

impl ClassicalPropagator {
    pub fn new(params: DuffingParams, state: ClassicalState) -> Self {
        ClassicalPropagator {
            params,
            state,
            t0: state.t,
            steps: 0,
        }
    }

    pub fn state(&self) -> &ClassicalState {
        &self.state
    }
}

impl Propagator for ClassicalPropagator {
    fn time(&self) -> f64 {
        self.state.t
    }

    fn step(&mut self, dt: f64, _ns: &mut NoiseStream) -> Result<StepInfo> {
        let mut s = classical_step(&self.state, &self.params, dt);
        self.steps += 1;
        s.t = self.t0 + self.steps as f64 * dt;
        if !(s.x.is_finite() && s.p.is_finite()) {
            return Err(QsdError::Divergence { t: s.t });
        }
        self.state = s;
        Ok(StepInfo::default())
    }

    fn moments(&self) -> MomentSet {
        MomentSet {
            q_mean: self.state.x,
            p_mean: self.state.p,
            var_q: 0.0,
            var_p: 0.0,
            sym_cov: 0.0,
        }
    }

    fn basis_dim(&self) -> usize {
        0
    }
}

/// Classical section over `periods` drive periods with RK4 at
/// `dt = 2π/steps_per_period`, starting at `t = 0`. Returns `periods + 1`
/// points including the initial condition.
pub fn classical_section(
    params: &DuffingParams,
    x0: f64,
    p0: f64,
    periods: u64,
    steps_per_period: u64,
) -> Result<Vec<SectionPoint>> {
    if steps_per_period == 0 {
        return Err(QsdError::param("steps_per_period", "must be positive"));
    }
    let dt = TAU / steps_per_period as f64;
    let mut s = ClassicalState::new(x0, p0, 0.0);
    let mut out = Vec::with_capacity(periods as usize + 1);
    out.push(SectionPoint { n: 0, x: x0, p: p0 });
    for n in 1..=periods {
        let start = (n - 1) as f64 * TAU;
        for k in 1..=steps_per_period {
            s = classical_step(&s, params, dt);
            s.t = start + k as f64 * dt;
        }
        s.t = n as f64 * TAU;
        if !(s.x.is_finite() && s.p.is_finite()) {
            return Err(QsdError::Divergence { t: s.t });
        }
        out.push(SectionPoint { n, x: s.x, p: s.p });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV

/// Metadata written on the first line of a section file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionHeader {
    pub model: String,
    pub beta: f64,
    pub gamma: f64,
    pub g: f64,
    /// `None` for deterministic (classical, noise-free) runs.
    pub seed: Option<u64>,
}

impl SectionHeader {
    pub fn new(model: &str, params: &DuffingParams, seed: Option<u64>) -> Self {
        SectionHeader {
            model: model.to_string(),
            beta: params.beta,
            gamma: params.gamma,
            g: params.g,
            seed,
        }
    }

    fn line(&self) -> String {
        let seed = match self.seed {
            Some(s) => s.to_string(),
            None => "none".to_string(),
        };
        format!(
            "# qsd-lab section v1; model={}; beta={}; gamma={}; g={}; seed={}; coords=scaled",
            self.model, self.beta, self.gamma, self.g, seed
        )
    }
}

/// Formats with 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the section as CSV sorted by period index.
pub fn emit_section<W: Write>(points: &[SectionPoint], header: &SectionHeader, mut sink: W) -> Result<()> {
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|p| p.n);
    let mut text = String::with_capacity(64 * (sorted.len() + 2));
    text.push_str(&header.line());
    text.push('\n');
    text.push_str("n,x,p\n");
    for pt in &sorted {
        let _ = writeln!(text, "{},{},{}", pt.n, format_f64(pt.x), format_f64(pt.p));
    }
    sink.write_all(text.as_bytes())?;
    sink.flush()?;
    Ok(())
}

/// Parses a file written by [`emit_section`].
pub fn parse_section(text: &str) -> Result<(SectionHeader, Vec<SectionPoint>)> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, what: &str| QsdError::Config(format!("section line {}: {what}", line + 1));
    let (i, first) = lines.next().ok_or_else(|| bad(0, "empty file"))?;
    let body = first
        .strip_prefix("# qsd-lab section v1;")
        .ok_or_else(|| bad(i, "missing `# qsd-lab section v1` header"))?;
    let mut header = SectionHeader {
        model: String::new(),
        beta: f64::NAN,
        gamma: f64::NAN,
        g: f64::NAN,
        seed: None,
    };
    for field in body.split(';') {
        let field = field.trim();
        if field.is_empty() {
            continue;
        }
        let (k, v) = field.split_once('=').ok_or_else(|| bad(i, "malformed header field"))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(i, &format!("bad value for {k}")));
        match k {
            "model" => header.model = v.to_string(),
            "beta" => header.beta = num(v)?,
            "gamma" => header.gamma = num(v)?,
            "g" => header.g = num(v)?,
            "seed" => {
                header.seed = match v {
                    "none" => None,
                    s => Some(s.parse().map_err(|_| bad(i, "bad seed"))?),
                }
            }
            "coords" => {
                if v != "scaled" {
                    return Err(bad(i, "only scaled coordinates are supported"));
                }
            }
            _ => return Err(bad(i, &format!("unknown header field `{k}`"))),
        }
    }
    match lines.next() {
        Some((_, "n,x,p")) => {}
        Some((i, _)) => return Err(bad(i, "expected column header `n,x,p`")),
        None => return Err(bad(1, "missing column header")),
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let mut next = || cols.next().ok_or_else(|| bad(i, "expected three columns"));
        let n = next()?.parse::<u64>().map_err(|_| bad(i, "bad period index"))?;
        let x = next()?.parse::<f64>().map_err(|_| bad(i, "bad x"))?;
        let p = next()?.parse::<f64>().map_err(|_| bad(i, "bad p"))?;
        points.push(SectionPoint { n, x, p });
    }
    Ok((header, points))
}

// ---------------------------------------------------------------------------
// Occupancy grids

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub x_max: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl BoundingBox {
    /// Smallest box holding every point. Degenerate extents are widened
    /// slightly so the box has positive area.
    pub fn of(points: &[SectionPoint]) -> Result<Self> {
        if points.is_empty() {
            return Err(QsdError::param("points", "bounding box of an empty section"));
        }
        let mut b = BoundingBox {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            p_min: f64::INFINITY,
            p_max: f64::NEG_INFINITY,
        };
        for pt in points {
            b.x_min = b.x_min.min(pt.x);
            b.x_max = b.x_max.max(pt.x);
            b.p_min = b.p_min.min(pt.p);
            b.p_max = b.p_max.max(pt.p);
        }
        if b.x_max - b.x_min <= 0.0 {
            b.x_min -= 0.5;
            b.x_max += 0.5;
        }
        if b.p_max - b.p_min <= 0.0 {
            b.p_min -= 0.5;
            b.p_max += 0.5;
        }
        Ok(b)
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.min(other.x_min),
            x_max: self.x_max.max(other.x_max),
            p_min: self.p_min.min(other.p_min),
            p_max: self.p_max.max(other.p_max),
        }
    }

    /// Whether the point lies in the box widened by `slack` on every side.
    pub fn contains(&self, pt: &SectionPoint, slack: f64) -> bool {
        pt.x >= self.x_min - slack
            && pt.x <= self.x_max + slack
            && pt.p >= self.p_min - slack
            && pt.p <= self.p_max + slack
    }

    fn cell(&self, pt: &SectionPoint) -> Option<(usize, usize)> {
        if !self.contains(pt, 0.0) {
            return None;
        }
        let fx = (pt.x - self.x_min) / (self.x_max - self.x_min);
        let fp = (pt.p - self.p_min) / (self.p_max - self.p_min);
        let ix = ((fx * GRID_SIZE as f64) as usize).min(GRID_SIZE - 1);
        let ip = ((fp * GRID_SIZE as f64) as usize).min(GRID_SIZE - 1);
        Some((ix, ip))
    }
}

/// Which cells of a [`GRID_SIZE`]² grid over a bounding box hold at least one
/// section point. Points outside the box are not counted.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub bbox: BoundingBox,
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(points: &[SectionPoint], bbox: BoundingBox) -> Self {
        let mut cells = vec![false; GRID_SIZE * GRID_SIZE];
        for pt in points {
            if let Some((ix, ip)) = bbox.cell(pt) {
                cells[ip * GRID_SIZE + ix] = true;
            }
        }
        OccupancyGrid { bbox, cells }
    }

    pub fn occupied(&self, ix: usize, ip: usize) -> bool {
        self.cells[ip * GRID_SIZE + ix]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// `|A ∩ B| / |A ∪ B|`, with two empty grids counting as identical.
    pub fn jaccard(&self, other: &OccupancyGrid) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.cells.iter().zip(&other.cells) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Text form: a `bbox` line, then one row of `0`/`1` per momentum bin
    /// from `p_max` down to `p_min`. Lines starting with `#` are comments.
    pub fn to_text(&self, comment: &str) -> String {
        let mut out = String::new();
        for line in comment.lines() {
            let _ = writeln!(out, "# {line}");
        }
        let b = &self.bbox;
        let _ = writeln!(
            out,
            "bbox {} {} {} {}",
            format_f64(b.x_min),
            format_f64(b.x_max),
            format_f64(b.p_min),
            format_f64(b.p_max)
        );
        for ip in (0..GRID_SIZE).rev() {
            for ix in 0..GRID_SIZE {
                out.push(if self.occupied(ix, ip) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| QsdError::Config(format!("occupancy grid: {what}"));
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| bad("missing bbox line"))?;
        let nums: Vec<f64> = head
            .strip_prefix("bbox ")
            .ok_or_else(|| bad("missing bbox line"))?
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| bad("bad bbox value")))
            .collect::<Result<_>>()?;
        if nums.len() != 4 {
            return Err(bad("bbox needs four values"));
        }
        let bbox = BoundingBox {
            x_min: nums[0],
            x_max: nums[1],
            p_min: nums[2],
            p_max: nums[3],
        };
        let mut cells = vec![false; GRID_SIZE * GRID_SIZE];
        let rows: Vec<&str> = lines.collect();
        if rows.len() != GRID_SIZE {
            return Err(bad(&format!("expected {GRID_SIZE} rows, found {}", rows.len())));
        }
        for (r, row) in rows.iter().enumerate() {
            let ip = GRID_SIZE - 1 - r;
            if row.len() != GRID_SIZE {
                return Err(bad(&format!("row {} has {} cells", r + 1, row.len())));
            }
            for (ix, ch) in row.chars().enumerate() {
                cells[ip * GRID_SIZE + ix] = match ch {
                    '1' => true,
                    '0' => false,
                    _ => return Err(bad("cells must be 0 or 1")),
                };
            }
        }
        Ok(OccupancyGrid { bbox, cells })
    }
}

/// Jaccard similarity of two sections, gridded over the union of their
/// bounding boxes.
pub fn section_jaccard(a: &[SectionPoint], b: &[SectionPoint]) -> Result<f64> {
    let bbox = BoundingBox::of(a)?.union(&BoundingBox::of(b)?);
    Ok(OccupancyGrid::new(a, bbox).jaccard(&OccupancyGrid::new(b, bbox)))
}

/// Differences between two sections matched by period index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionDiff {
    pub matched: usize,
    pub rms: f64,
    pub max_abs_dx: f64,
    pub max_abs_dp: f64,
}

/// RMS of the Euclidean distance between points with the same period
/// index, and the largest coordinate differences.
pub fn section_diff(a: &[SectionPoint], b: &[SectionPoint]) -> SectionDiff {
    let mut by_n: std::collections::BTreeMap<u64, &SectionPoint> = a.iter().map(|p| (p.n, p)).collect();
    let (mut sum, mut matched, mut mx, mut mp) = (0.0, 0usize, 0.0f64, 0.0f64);
    for pb in b {
        if let Some(pa) = by_n.remove(&pb.n) {
            let (dx, dp) = (pa.x - pb.x, pa.p - pb.p);
            sum += dx * dx + dp * dp;
            matched += 1;
            mx = mx.max(dx.abs());
            mp = mp.max(dp.abs());
        }
    }
    SectionDiff {
        matched,
        rms: if matched > 0 { (sum / matched as f64).sqrt() } else { 0.0 },
        max_abs_dx: mx,
        max_abs_dp: mp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::run_propagator;

    fn pts() -> Vec<SectionPoint> {
        vec![
            SectionPoint { n: 2, x: 0.1, p: -1.0 / 3.0 },
            SectionPoint { n: 0, x: 1.0, p: 0.0 },
            SectionPoint { n: 1, x: std::f64::consts::PI, p: -2.5e-300 },
        ]
    }

    fn header() -> SectionHeader {
        SectionHeader::new("mqsd", &DuffingParams::default(), Some(42))
    }

    #[test]
    fn classical_initial_point_is_verbatim() {
        let s = ClassicalState::new(0.7, -0.2, 0.0);
        let pt = sample_point(SectionSource::Classical(&s), 0.5).unwrap();
        assert_eq!(pt, SectionPoint { n: 0, x: 0.7, p: -0.2 });
    }

    #[test]
    fn unit_beta_does_not_scale() {
        let m = MomentSet::coherent(1.25, -0.5);
        let pt = sample_point(SectionSource::Quantum { moments: &m, t: 3.0 * TAU }, 1.0).unwrap();
        assert_eq!(pt, SectionPoint { n: 3, x: 1.25, p: -0.5 });
        let pt = sample_point(SectionSource::Quantum { moments: &m, t: TAU }, 0.1).unwrap();
        assert!((pt.x - 0.125).abs() < 1e-15);
    }

    #[test]
    fn off_phase_sample_is_rejected() {
        let s = ClassicalState::new(0.0, 0.0, 1.0);
        assert!(matches!(
            sample_point(SectionSource::Classical(&s), 1.0),
            Err(QsdError::Config(_))
        ));
    }

    #[test]
    fn undriven_fixed_point_section() {
        let params = DuffingParams::new(0.125, 0.0, 1.0).unwrap();
        let section = classical_section(&params, 0.8, 0.3, 60, 2000).unwrap();
        for pt in &section[30..] {
            assert!((pt.x - 1.0).abs() < 1e-3 && pt.p.abs() < 1e-3, "{pt:?}");
        }
    }

    #[test]
    fn empty_section_is_header_only() {
        let mut buf = Vec::new();
        emit_section(&[], &header(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "# qsd-lab section v1; model=mqsd; beta=1; gamma=0.125; g=0.3; seed=42; coords=scaled\nn,x,p\n"
        );
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut buf = Vec::new();
        emit_section(&pts(), &header(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(!text.contains('\r'));
        let (h, back) = parse_section(&text).unwrap();
        assert_eq!(h, header());
        let mut expect = pts();
        expect.sort_by_key(|p| p.n);
        assert_eq!(back.len(), 3);
        for (a, b) in expect.iter().zip(&back) {
            assert_eq!(a.n, b.n);
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.p.to_bits(), b.p.to_bits());
        }
    }

    #[test]
    fn grid_text_round_trip() {
        let section = classical_section(&DuffingParams::default(), 1.0, 0.0, 200, 500).unwrap();
        let grid = OccupancyGrid::new(&section, BoundingBox::of(&section).unwrap());
        let back = OccupancyGrid::from_text(&grid.to_text("test grid")).unwrap();
        assert_eq!(back, grid);
        assert_eq!(grid.jaccard(&back), 1.0);
        assert!(grid.count() > 0);
    }

    #[test]
    fn diff_of_identical_sections_is_zero() {
        let d = section_diff(&pts(), &pts());
        assert_eq!(d.matched, 3);
        assert_eq!(d.rms, 0.0);
        assert_eq!(section_jaccard(&pts(), &pts()).unwrap(), 1.0);
    }

    #[test]
    fn sampler_matches_direct_classical_section() {
        let params = DuffingParams::default();
        let spp = 400;
        let direct = classical_section(&params, 1.0, 0.0, 5, spp).unwrap();
        let mut prop = ClassicalPropagator::new(params, ClassicalState::new(1.0, 0.0, 0.0));
        let mut sampler = SectionSampler::new(1.0);
        run_propagator(
            &mut prop,
            5.0 * TAU,
            TAU / spp as f64,
            &mut NoiseStream::new(0),
            &mut [&mut sampler],
            spp,
        )
        .unwrap();
        let via = sampler.into_points();
        assert_eq!(via.len(), 6);
        for (a, b) in direct.iter().zip(&via) {
            assert_eq!(a.n, b.n);
            assert!((a.x - b.x).abs() < 1e-12 && (a.p - b.p).abs() < 1e-12);
        }
    }
}
