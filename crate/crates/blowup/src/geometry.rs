//! Planar domains, graded triangulations and source-centered charts.
//!
//! The solver operates on flat polygonal/circular domains; curved geometry
//! enters only through an optional conformal factor and through the
//! per-source charts used by the Green-function and bubble machinery.
//! Meshes are unstructured Delaunay triangulations built from a sizing
//! field: a global target size plus graded refinement disks around marked
//! points (bubble cores, Green sources).

use crate::error::{Error, Result};
use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

pub type P2 = [f64; 2];

#[inline]
pub fn sub(a: P2, b: P2) -> P2 {
    [a[0] - b[0], a[1] - b[1]]
}
#[inline]
pub fn dot(a: P2, b: P2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}
#[inline]
pub fn norm(a: P2) -> f64 {
    a[0].hypot(a[1])
}
#[inline]
pub fn dist(a: P2, b: P2) -> f64 {
    norm(sub(a, b))
}
#[inline]
fn cross(a: P2, b: P2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Supported domain shapes. Polygons are simple, counterclockwise loops.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    UnitDisk,
    Rectangle { w: f64, h: f64 },
    Annulus { r_in: f64, r_out: f64 },
    Polygon { vertices: Vec<P2> },
}

/// One closed boundary component, parameterized by arclength with the
/// domain on its left.
#[derive(Debug, Clone)]
pub enum Curve {
    /// `ccw = true` when the domain is inside the circle.
    Circle { center: P2, radius: f64, ccw: bool },
    /// Closed polyline, oriented with the domain on the left.
    Loop { pts: Vec<P2> },
}

impl Curve {
    pub fn len(&self) -> f64 {
        match self {
            Curve::Circle { radius, .. } => 2.0 * PI * radius,
            Curve::Loop { pts } => {
                let n = pts.len();
                (0..n).map(|i| dist(pts[i], pts[(i + 1) % n])).sum()
            }
        }
    }

    /// Point at arclength `s` from the component origin.
    pub fn point_at(&self, s: f64) -> P2 {
        match self {
            Curve::Circle { center, radius, ccw } => {
                let th = if *ccw { s / radius } else { -s / radius };
                [center[0] + radius * th.cos(), center[1] + radius * th.sin()]
            }
            Curve::Loop { pts } => {
                let n = pts.len();
                let mut rem = s.rem_euclid(self.len());
                for i in 0..n {
                    let a = pts[i];
                    let b = pts[(i + 1) % n];
                    let l = dist(a, b);
                    if rem <= l || i == n - 1 {
                        let t = (rem / l).min(1.0);
                        return [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                    }
                    rem -= l;
                }
                pts[0]
            }
        }
    }

    /// Unit tangent in the direction of increasing arclength.
    pub fn tangent_at(&self, s: f64) -> P2 {
        match self {
            Curve::Circle { radius, ccw, .. } => {
                let th = if *ccw { s / radius } else { -s / radius };
                if *ccw {
                    [-th.sin(), th.cos()]
                } else {
                    [th.sin(), -th.cos()]
                }
            }
            Curve::Loop { pts } => {
                let n = pts.len();
                let mut rem = s.rem_euclid(self.len());
                for i in 0..n {
                    let a = pts[i];
                    let b = pts[(i + 1) % n];
                    let l = dist(a, b);
                    if rem <= l || i == n - 1 {
                        let d = sub(b, a);
                        let ln = norm(d);
                        return [d[0] / ln, d[1] / ln];
                    }
                    rem -= l;
                }
                [1.0, 0.0]
            }
        }
    }

    /// Outward unit normal (right of the tangent; the domain is on the left).
    pub fn normal_at(&self, s: f64) -> P2 {
        let t = self.tangent_at(s);
        [t[1], -t[0]]
    }

    /// Arclength of the closest point on the curve to `x`.
    pub fn project(&self, x: P2) -> f64 {
        match self {
            Curve::Circle { center, radius, ccw } => {
                let d = sub(x, *center);
                let th = d[1].atan2(d[0]).rem_euclid(2.0 * PI);
                if *ccw {
                    th * radius
                } else {
                    (2.0 * PI - th).rem_euclid(2.0 * PI) * radius
                }
            }
            Curve::Loop { pts } => {
                let n = pts.len();
                let mut best = (f64::INFINITY, 0.0);
                let mut acc = 0.0;
                for i in 0..n {
                    let a = pts[i];
                    let b = pts[(i + 1) % n];
                    let ab = sub(b, a);
                    let l = norm(ab);
                    let t = (dot(sub(x, a), ab) / (l * l)).clamp(0.0, 1.0);
                    let p = [a[0] + t * ab[0], a[1] + t * ab[1]];
                    let d = dist(x, p);
                    if d < best.0 {
                        best = (d, acc + t * l);
                    }
                    acc += l;
                }
                best.1
            }
        }
    }
}

impl Shape {
    pub fn boundary_curves(&self) -> Vec<Curve> {
        match self {
            Shape::UnitDisk => vec![Curve::Circle { center: [0.0, 0.0], radius: 1.0, ccw: true }],
            Shape::Rectangle { w, h } => vec![Curve::Loop {
                pts: vec![[0.0, 0.0], [*w, 0.0], [*w, *h], [0.0, *h]],
            }],
            Shape::Annulus { r_in, r_out } => vec![
                Curve::Circle { center: [0.0, 0.0], radius: *r_out, ccw: true },
                Curve::Circle { center: [0.0, 0.0], radius: *r_in, ccw: false },
            ],
            Shape::Polygon { vertices } => vec![Curve::Loop { pts: vertices.clone() }],
        }
    }

    /// Signed distance to the boundary, positive inside.
    pub fn signed_dist(&self, x: P2) -> f64 {
        match self {
            Shape::UnitDisk => 1.0 - norm(x),
            Shape::Rectangle { w, h } => {
                let dx = x[0].min(*w - x[0]);
                let dy = x[1].min(*h - x[1]);
                if dx >= 0.0 && dy >= 0.0 {
                    dx.min(dy)
                } else {
                    // outside: negative of Euclidean distance to the box
                    let cx = x[0].clamp(0.0, *w);
                    let cy = x[1].clamp(0.0, *h);
                    -dist(x, [cx, cy])
                }
            }
            Shape::Annulus { r_in, r_out } => {
                let r = norm(x);
                (r_out - r).min(r - r_in)
            }
            Shape::Polygon { vertices } => {
                let curve = Curve::Loop { pts: vertices.clone() };
                let s = curve.project(x);
                let p = curve.point_at(s);
                let d = dist(x, p);
                if point_in_polygon(x, vertices) {
                    d
                } else {
                    -d
                }
            }
        }
    }

    pub fn inside(&self, x: P2) -> bool {
        self.signed_dist(x) > 0.0
    }

    pub fn area_exact(&self) -> Option<f64> {
        match self {
            Shape::UnitDisk => Some(PI),
            Shape::Rectangle { w, h } => Some(w * h),
            Shape::Annulus { r_in, r_out } => Some(PI * (r_out * r_out - r_in * r_in)),
            Shape::Polygon { vertices } => {
                let n = vertices.len();
                let mut a = 0.0;
                for i in 0..n {
                    a += cross(vertices[i], vertices[(i + 1) % n]);
                }
                Some(0.5 * a)
            }
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            Shape::UnitDisk => 2.0,
            Shape::Rectangle { w, h } => w.hypot(*h),
            Shape::Annulus { r_out, .. } => 2.0 * r_out,
            Shape::Polygon { vertices } => {
                let mut d = 0.0f64;
                for i in 0..vertices.len() {
                    for j in i + 1..vertices.len() {
                        d = d.max(dist(vertices[i], vertices[j]));
                    }
                }
                d
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Shape::Rectangle { w, h } if *w <= 0.0 || *h <= 0.0 => {
                Err(Error::InvalidDomain(format!("rectangle {w} x {h}")))
            }
            Shape::Annulus { r_in, r_out } if *r_in <= 0.0 || r_out <= r_in => {
                Err(Error::InvalidDomain(format!("annulus [{r_in}, {r_out}]")))
            }
            Shape::Polygon { vertices } if vertices.len() < 3 => {
                Err(Error::InvalidDomain("polygon needs >= 3 vertices".into()))
            }
            Shape::Polygon { vertices } => {
                let a: f64 = {
                    let n = vertices.len();
                    (0..n).map(|i| cross(vertices[i], vertices[(i + 1) % n])).sum()
                };
                if a <= 0.0 {
                    Err(Error::InvalidDomain("polygon must be counterclockwise".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

fn point_in_polygon(x: P2, pts: &[P2]) -> bool {
    let mut inside = false;
    let n = pts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (pi, pj) = (pts[i], pts[j]);
        if (pi[1] > x[1]) != (pj[1] > x[1])
            && x[0] < (pj[0] - pi[0]) * (x[1] - pi[1]) / (pj[1] - pi[1]) + pi[0]
        {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Conformal factor `phi` of the metric `e^{phi} dx^2`; `None` means flat.
pub type Conformal = Arc<dyn Fn(P2) -> f64 + Send + Sync>;

/// Domain description: shape, optional conformal factor, global mesh size.
#[derive(Clone)]
pub struct Domain {
    pub shape: Shape,
    pub conformal: Option<Conformal>,
    pub target_h: f64,
}

impl Domain {
    pub fn new(shape: Shape, target_h: f64) -> Result<Self> {
        shape.validate()?;
        if !(target_h > 0.0) {
            return Err(Error::InvalidDomain(format!("target_h = {target_h}")));
        }
        Ok(Domain { shape, conformal: None, target_h })
    }

    pub fn with_conformal(mut self, f: Conformal) -> Self {
        self.conformal = Some(f);
        self
    }

    pub fn conf_weight(&self, x: P2) -> f64 {
        match &self.conformal {
            Some(f) => f(x).exp(),
            None => 1.0,
        }
    }
}

/// A refinement disk: elements inside `inner_radius` of `center` have
/// diameter at most `min_h`, grading back to the global size outside.
#[derive(Debug, Clone, Copy)]
pub struct RefineSite {
    pub center: P2,
    pub min_h: f64,
    pub inner_radius: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RefinementPlan {
    pub sites: Vec<RefineSite>,
}

impl RefinementPlan {
    pub fn none() -> Self {
        Self::default()
    }
    pub fn single(center: P2, min_h: f64, inner_radius: f64) -> Self {
        RefinementPlan { sites: vec![RefineSite { center, min_h, inner_radius }] }
    }
}

/// Mesh-size growth rate away from refinement disks; adjacent elements
/// differ by roughly this fraction, which keeps triangle quality high
/// under strong grading.
const GRADING: f64 = 0.2;
/// Candidate points closer than this fraction of the local size to an
/// accepted point are culled before triangulation.
const THIN: f64 = 0.66;
/// Nominal spacing as a fraction of the requested size bound. Adjacent
/// rings of candidate points drift in and out of phase, so the worst
/// Delaunay edge approaches sqrt(2) x spacing; 0.70 keeps that below the
/// bound and the centroid-splitting pass nearly idle.
const SPACING: f64 = 0.70;

/// Arclength map of the (possibly multi-component) boundary.
#[derive(Debug, Clone)]
pub struct BoundaryParam {
    pub curves: Vec<Curve>,
    /// Arclength offset of each component in the global parameter.
    pub offsets: Vec<f64>,
    pub total_len: f64,
    /// Boundary nodes as (global arclength, node index), sorted.
    pub nodes: Vec<(f64, usize)>,
}

impl BoundaryParam {
    fn split(&self, s: f64) -> (usize, f64) {
        let s = s.rem_euclid(self.total_len);
        for (i, off) in self.offsets.iter().enumerate() {
            let l = self.curves[i].len();
            if s < off + l || i == self.curves.len() - 1 {
                return (i, s - off);
            }
        }
        (0, s)
    }
    pub fn point_at(&self, s: f64) -> P2 {
        let (i, t) = self.split(s);
        self.curves[i].point_at(t)
    }
    pub fn tangent_at(&self, s: f64) -> P2 {
        let (i, t) = self.split(s);
        self.curves[i].tangent_at(t)
    }
    pub fn normal_at(&self, s: f64) -> P2 {
        let (i, t) = self.split(s);
        self.curves[i].normal_at(t)
    }
    /// Global arclength of the closest boundary point to `x`.
    pub fn project(&self, x: P2) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (i, c) in self.curves.iter().enumerate() {
            let s = c.project(x);
            let d = dist(x, c.point_at(s));
            if d < best.0 {
                best = (d, self.offsets[i] + s);
            }
        }
        best.1
    }
}

/// Result of point location.
#[derive(Debug, Clone, Copy)]
pub enum Located {
    /// Triangle index and barycentric coordinates.
    Inside(usize, [f64; 3]),
    /// Signed distance to the boundary (negative: outside).
    Outside(f64),
}

/// Conforming triangulation with boundary structure and area weights.
pub struct Mesh {
    pub domain: Domain,
    pub nodes: Vec<P2>,
    /// `e^{phi}` sampled at nodes (1 for flat metrics). Quadrature samples
    /// the conformal factor at quadrature points, not at nodes; these
    /// weights exist for the on-disk format and diagnostics.
    pub node_weight: Vec<f64>,
    /// Counterclockwise triangles.
    pub tris: Vec<[usize; 3]>,
    /// Oriented boundary edges (domain on the left).
    pub bedges: Vec<[usize; 2]>,
    pub boundary: BoundaryParam,
    /// `boundary_s[i]` is the arclength of node `i`, NaN for interior nodes.
    pub boundary_s: Vec<f64>,
    /// Triangle adjacency across each edge (tri, local edge) -> neighbor.
    adj: Vec<[Option<usize>; 3]>,
    /// Uniform bucket grid over nodes for locate().
    grid: HashMap<(i64, i64), Vec<usize>>,
    grid_cell: f64,
    /// One incident triangle per node.
    node_tri: Vec<usize>,
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
    pub fn n_tris(&self) -> usize {
        self.tris.len()
    }

    pub fn tri_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.tris[t];
        0.5 * cross(sub(self.nodes[b], self.nodes[a]), sub(self.nodes[c], self.nodes[a]))
    }

    pub fn tri_diameter(&self, t: usize) -> f64 {
        let [a, b, c] = self.tris[t];
        dist(self.nodes[a], self.nodes[b])
            .max(dist(self.nodes[b], self.nodes[c]))
            .max(dist(self.nodes[c], self.nodes[a]))
    }

    /// Flat (coordinate) area; the metric area comes from fem quadrature.
    pub fn coord_area(&self) -> f64 {
        (0..self.tris.len()).map(|t| self.tri_area(t)).sum()
    }

    pub fn is_boundary_node(&self, i: usize) -> bool {
        !self.boundary_s[i].is_nan()
    }

    fn nearest_node(&self, x: P2) -> usize {
        let c = self.grid_cell;
        let (ix, iy) = ((x[0] / c).floor() as i64, (x[1] / c).floor() as i64);
        let mut best = (f64::INFINITY, 0usize);
        for ring in 0..64i64 {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    if dx.abs() != ring && dy.abs() != ring {
                        continue;
                    }
                    if let Some(v) = self.grid.get(&(ix + dx, iy + dy)) {
                        for &i in v {
                            let d = dist(x, self.nodes[i]);
                            if d < best.0 {
                                best = (d, i);
                            }
                        }
                    }
                }
            }
            // one extra ring after the first hit guarantees correctness
            if best.0.is_finite() && best.0 < (ring as f64) * c {
                break;
            }
        }
        best.1
    }

    fn bary(&self, t: usize, x: P2) -> [f64; 3] {
        let [a, b, c] = self.tris[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        let det = cross(sub(pb, pa), sub(pc, pa));
        let l0 = cross(sub(pb, x), sub(pc, x)) / det;
        let l1 = cross(sub(pc, x), sub(pa, x)) / det;
        [l0, l1, 1.0 - l0 - l1]
    }

    /// Locate `x` by walking the triangulation from the nearest node.
    pub fn locate(&self, x: P2) -> Located {
        let sd = self.domain.shape.signed_dist(x);
        if sd < -1e-12 * self.domain.shape.diameter() {
            return Located::Outside(sd);
        }
        let start = self.nearest_node(x);
        let mut t = self.node_tri[start];
        let mut visited = 0usize;
        loop {
            let l = self.bary(t, x);
            let (mut worst, mut wi) = (l[0], 0usize);
            for i in 1..3 {
                if l[i] < worst {
                    worst = l[i];
                    wi = i;
                }
            }
            if worst >= -1e-12 {
                return Located::Inside(t, [l[0].max(0.0), l[1].max(0.0), l[2].max(0.0)]);
            }
            // cross the edge opposite to the most negative barycentric coord
            match self.adj[t][wi] {
                Some(n) => t = n,
                None => {
                    // Walked out through a hull edge. Points that passed the
                    // signed-distance check but fall in the sliver between
                    // the polygonal hull and the curved boundary are handled
                    // by clamping to the boundary triangle they left through.
                    if worst > -0.5 {
                        return Located::Inside(
                            t,
                            [l[0].max(0.0), l[1].max(0.0), l[2].max(0.0)],
                        );
                    }
                    return self.locate_scan(x, sd);
                }
            }
            visited += 1;
            if visited > self.tris.len() {
                return self.locate_scan(x, sd);
            }
        }
    }

    fn locate_scan(&self, x: P2, sd: f64) -> Located {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for t in 0..self.tris.len() {
            let l = self.bary(t, x);
            let worst = l[0].min(l[1]).min(l[2]);
            if worst > best.0 {
                best = (worst, t);
            }
            if worst >= -1e-12 {
                return Located::Inside(t, [l[0].max(0.0), l[1].max(0.0), l[2].max(0.0)]);
            }
        }
        // Anything reaching this point is inside the curved domain (the
        // signed-distance gate ran first), so a mildly negative barycentric
        // coordinate can only mean the hull-boundary sliver gap.
        if best.0 > -0.5 {
            let l = self.bary(best.1, x);
            return Located::Inside(
                best.1,
                [l[0].max(0.0), l[1].max(0.0), l[2].max(0.0)],
            );
        }
        Located::Outside(sd.min(0.0))
    }

    /// Serialize in the plain-text exchange format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "nodes {} triangles {} bedges {}",
            self.nodes.len(),
            self.tris.len(),
            self.bedges.len()
        );
        for (p, w) in self.nodes.iter().zip(&self.node_weight) {
            let _ = writeln!(s, "{:.17e} {:.17e} {:.17e}", p[0], p[1], w);
        }
        for t in &self.tris {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        for e in &self.bedges {
            let _ = writeln!(s, "{} {}", e[0], e[1]);
        }
        s
    }
}

/// Raw mesh data parsed from the exchange format (geometry only; no
/// boundary parameterization is reconstructed).
pub struct RawMesh {
    pub nodes: Vec<P2>,
    pub node_weight: Vec<f64>,
    pub tris: Vec<[usize; 3]>,
    pub bedges: Vec<[usize; 2]>,
}

pub fn parse_mesh_text(text: &str) -> Result<RawMesh> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty mesh file".into()))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 6 || toks[0] != "nodes" || toks[2] != "triangles" || toks[4] != "bedges" {
        return Err(Error::Parse(format!("bad mesh header: {header}")));
    }
    let bad = |t: &str| Error::Parse(format!("bad number: {t}"));
    let n: usize = toks[1].parse().map_err(|_| bad(toks[1]))?;
    let m: usize = toks[3].parse().map_err(|_| bad(toks[3]))?;
    let k: usize = toks[5].parse().map_err(|_| bad(toks[5]))?;
    let mut nodes = Vec::with_capacity(n);
    let mut node_weight = Vec::with_capacity(n);
    for _ in 0..n {
        let l = lines.next().ok_or_else(|| Error::Parse("truncated nodes".into()))?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(t)))
            .collect::<Result<_>>()?;
        if v.len() != 3 {
            return Err(Error::Parse(format!("bad node line: {l}")));
        }
        nodes.push([v[0], v[1]]);
        node_weight.push(v[2]);
    }
    let idx = |t: &str| -> Result<usize> {
        let i: usize = t.parse().map_err(|_| bad(t))?;
        if i >= n {
            return Err(Error::Parse(format!("index {i} out of range")));
        }
        Ok(i)
    };
    let mut tris = Vec::with_capacity(m);
    for _ in 0..m {
        let l = lines.next().ok_or_else(|| Error::Parse("truncated triangles".into()))?;
        let v: Vec<&str> = l.split_whitespace().collect();
        if v.len() != 3 {
            return Err(Error::Parse(format!("bad triangle line: {l}")));
        }
        tris.push([idx(v[0])?, idx(v[1])?, idx(v[2])?]);
    }
    let mut bedges = Vec::with_capacity(k);
    for _ in 0..k {
        let l = lines.next().ok_or_else(|| Error::Parse("truncated bedges".into()))?;
        let v: Vec<&str> = l.split_whitespace().collect();
        if v.len() != 2 {
            return Err(Error::Parse(format!("bad bedge line: {l}")));
        }
        bedges.push([idx(v[0])?, idx(v[1])?]);
    }
    Ok(RawMesh { nodes, node_weight, tris, bedges })
}

/// Multi-resolution bucket grid used for proximity culling of mesh
/// candidate points (sizes span several orders of magnitude, so a single
/// uniform grid would be either too coarse or too large).
struct ThinGrid {
    levels: Vec<(f64, HashMap<(i64, i64), Vec<P2>>)>,
    h_min: f64,
}

impl ThinGrid {
    fn new(h_min: f64, h_max: f64) -> Self {
        let mut levels = Vec::new();
        let mut c = h_min;
        while c < 2.0 * h_max {
            levels.push((c, HashMap::new()));
            c *= 2.0;
        }
        ThinGrid { levels, h_min }
    }
    fn level_for(&self, h: f64) -> usize {
        let mut i = ((h / self.h_min).log2()).floor() as i64;
        i = i.clamp(0, self.levels.len() as i64 - 1);
        i as usize
    }
    fn insert(&mut self, p: P2, h: f64) {
        let li = self.level_for(h);
        let c = self.levels[li].0;
        let key = ((p[0] / c).floor() as i64, (p[1] / c).floor() as i64);
        self.levels[li].1.entry(key).or_default().push(p);
    }
    /// Any accepted point within `r` of `p`?
    fn near(&self, p: P2, r: f64) -> bool {
        for (c, map) in &self.levels {
            let reach = ((r / c).ceil() as i64).max(1);
            let (ix, iy) = ((p[0] / c).floor() as i64, (p[1] / c).floor() as i64);
            for dx in -reach..=reach {
                for dy in -reach..=reach {
                    if let Some(v) = map.get(&(ix + dx, iy + dy)) {
                        for &q in v {
                            if dist(p, q) < r {
                                return true;
                            }
                        }
                    }
                }
            }
        }
        false
    }
}

/// Local mesh size: global target graded down inside refinement disks.
pub fn sizing(domain: &Domain, plan: &RefinementPlan, x: P2) -> f64 {
    let mut h = domain.target_h;
    for s in &plan.sites {
        let d = dist(x, s.center);
        let loc = if d <= s.inner_radius {
            s.min_h
        } else {
            s.min_h + GRADING * (d - s.inner_radius)
        };
        h = h.min(loc);
    }
    h
}

/// Place nodes along one boundary curve with local spacing `SPACING * h`,
/// keeping `anchors` (arclengths that must become nodes) exact.
fn boundary_nodes_on_curve(
    domain: &Domain,
    plan: &RefinementPlan,
    curve: &Curve,
    anchors: &[f64],
) -> Vec<f64> {
    let total = curve.len();
    let mut marks: Vec<f64> = anchors.iter().map(|s| s.rem_euclid(total)).collect();
    marks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    marks.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * total);
    if marks.is_empty() {
        marks.push(0.0);
    }
    let mut out = Vec::new();
    let m = marks.len();
    for i in 0..m {
        let s0 = marks[i];
        let s1 = if i + 1 < m { marks[i + 1] } else { marks[0] + total };
        out.push(s0);
        let seg = s1 - s0;
        if seg <= 0.0 {
            continue;
        }
        // integrate 1/h along the segment, then split into equal weights
        let fine = 200.max((seg / (0.05 * domain.target_h)).ceil() as usize).min(400_000);
        let ds = seg / fine as f64;
        let mut w = vec![0.0f64; fine + 1];
        for j in 1..=fine {
            let s = s0 + (j as f64 - 0.5) * ds;
            let h = sizing(domain, plan, curve.point_at(s));
            w[j] = w[j - 1] + ds / (SPACING * h);
        }
        let nseg = (w[fine].round() as usize).max(1);
        for k in 1..nseg {
            let target = w[fine] * k as f64 / nseg as f64;
            // invert the cumulative weight by binary search
            let mut lo = 0usize;
            let mut hi = fine;
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if w[mid] < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let frac = (target - w[lo]) / (w[hi] - w[lo]);
            out.push(s0 + (lo as f64 + frac) * ds);
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

/// Build a graded Delaunay mesh of the domain.
///
/// Guarantees (checked in tests): element diameter <= target_h away from
/// refinement sites and <= min_h inside each site's inner radius; boundary
/// nodes lie exactly on the boundary curves; refinement centers are nodes.
pub fn generate_mesh(domain: &Domain, plan: &RefinementPlan) -> Result<Mesh> {
    domain.shape.validate()?;
    for s in &plan.sites {
        if !(s.min_h > 0.0) || !(s.inner_radius >= 0.0) {
            return Err(Error::Mesh(format!("bad refinement site {s:?}")));
        }
    }
    let shape = &domain.shape;
    let diam = shape.diameter();
    let h_min = plan
        .sites
        .iter()
        .map(|s| s.min_h)
        .fold(domain.target_h, f64::min);

    // --- boundary nodes ---
    let curves = shape.boundary_curves();
    let mut offsets = Vec::new();
    let mut acc = 0.0;
    for c in &curves {
        offsets.push(acc);
        acc += c.len();
    }
    let total_len = acc;

    let mut bnode_pos: Vec<P2> = Vec::new();
    let mut bnode_s: Vec<f64> = Vec::new();
    let mut chains: Vec<Vec<usize>> = Vec::new();
    for (ci, curve) in curves.iter().enumerate() {
        let mut anchors: Vec<f64> = Vec::new();
        if let Curve::Loop { pts } = curve {
            let mut s = 0.0;
            for i in 0..pts.len() {
                anchors.push(s);
                s += dist(pts[i], pts[(i + 1) % pts.len()]);
            }
        }
        for site in &plan.sites {
            let s = curve.project(site.center);
            if dist(curve.point_at(s), site.center) < 1e-9 * diam {
                anchors.push(s);
            }
        }
        let svals = boundary_nodes_on_curve(domain, plan, curve, &anchors);
        let mut chain = Vec::with_capacity(svals.len());
        for s in svals {
            chain.push(bnode_pos.len());
            bnode_pos.push(curve.point_at(s));
            bnode_s.push(offsets[ci] + s);
        }
        chains.push(chain);
    }

    // --- interior candidates: refinement rings, then a hex background ---
    let mut grid = ThinGrid::new(0.5 * SPACING * h_min, domain.target_h);
    let mut accepted: Vec<P2> = Vec::new();
    let margin = |x: P2| 0.52 * SPACING * sizing(domain, plan, x);
    for (i, p) in bnode_pos.iter().enumerate() {
        let _ = i;
        grid.insert(*p, sizing(domain, plan, *p));
    }
    let push_candidate = |grid: &mut ThinGrid, accepted: &mut Vec<P2>, p: P2| {
        let h = sizing(domain, plan, p);
        if shape.signed_dist(p) < 0.55 * SPACING * h {
            return;
        }
        if grid.near(p, THIN * SPACING * h) {
            return;
        }
        grid.insert(p, h);
        accepted.push(p);
    };

    for site in &plan.sites {
        let c = site.center;
        let on_bdry = shape.signed_dist(c).abs() < 1e-9 * diam;
        if !on_bdry {
            if shape.signed_dist(c) <= 0.0 {
                return Err(Error::OutsideDomain(c[0], c[1], shape.signed_dist(c)));
            }
            push_candidate(&mut grid, &mut accepted, c);
        }
        let mut r = 0.0f64;
        let mut k = 0usize;
        loop {
            let h_loc = SPACING * sizing(domain, plan, [c[0] + r, c[1]]);
            r += h_loc;
            if sizing(domain, plan, [c[0] + r, c[1]]) >= domain.target_h * 0.999
                && r > site.inner_radius
            {
                break;
            }
            if r > 2.0 * diam {
                break;
            }
            let n = ((2.0 * PI * r / h_loc).ceil() as usize).max(6);
            let off = if k % 2 == 0 { 0.0 } else { PI / n as f64 };
            for j in 0..n {
                let th = off + 2.0 * PI * j as f64 / n as f64;
                let p = [c[0] + r * th.cos(), c[1] + r * th.sin()];
                push_candidate(&mut grid, &mut accepted, p);
            }
            k += 1;
        }
    }

    // hex lattice over the bounding box
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &curves {
        let n = (c.len() / (0.25 * domain.target_h)).ceil() as usize;
        for i in 0..n {
            let p = c.point_at(c.len() * i as f64 / n as f64);
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
    }
    let step = SPACING * domain.target_h;
    let rows = ((hi[1] - lo[1]) / (step * 0.866)).ceil() as usize + 1;
    let cols = ((hi[0] - lo[0]) / step).ceil() as usize + 2;
    for r in 0..rows {
        let y = lo[1] + r as f64 * step * 0.866;
        let xoff = if r % 2 == 0 { 0.0 } else { 0.5 * step };
        for cidx in 0..cols {
            let x = lo[0] + xoff + cidx as f64 * step;
            let p = [x, y];
            if shape.signed_dist(p) < margin(p) {
                continue;
            }
            push_candidate(&mut grid, &mut accepted, p);
        }
    }

    // --- triangulate ---
    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> =
        ConstrainedDelaunayTriangulation::new();
    let mut handles = Vec::new();
    let mut nodes: Vec<P2> = Vec::new();
    for p in bnode_pos.iter().chain(accepted.iter()) {
        let h = cdt
            .insert(Point2::new(p[0], p[1]))
            .map_err(|e| Error::Mesh(format!("insert failed: {e:?}")))?;
        handles.push(h);
        nodes.push(*p);
    }
    if cdt.num_vertices() != nodes.len() {
        return Err(Error::Mesh("duplicate points collapsed during insertion".into()));
    }
    for chain in &chains {
        let n = chain.len();
        for i in 0..n {
            let a = handles[chain[i]];
            let b = handles[chain[(i + 1) % n]];
            cdt.add_constraint(a, b);
        }
    }

    let keep_cull = matches!(shape, Shape::Annulus { .. } | Shape::Polygon { .. });
    let extract = |cdt: &ConstrainedDelaunayTriangulation<Point2<f64>>,
                   nodes: &[P2]|
     -> Vec<[usize; 3]> {
        let mut tris = Vec::new();
        for f in cdt.inner_faces() {
            let vs = f.vertices();
            let [a, b, c] = [vs[0].index(), vs[1].index(), vs[2].index()];
            if keep_cull {
                let ctr = [
                    (nodes[a][0] + nodes[b][0] + nodes[c][0]) / 3.0,
                    (nodes[a][1] + nodes[b][1] + nodes[c][1]) / 3.0,
                ];
                if !shape.inside(ctr) {
                    continue;
                }
            }
            // enforce counterclockwise orientation
            if cross(sub(nodes[b], nodes[a]), sub(nodes[c], nodes[a])) > 0.0 {
                tris.push([a, b, c]);
            } else {
                tris.push([a, c, b]);
            }
        }
        tris
    };
    let mut tris = extract(&cdt, &nodes);
    if tris.is_empty() {
        return Err(Error::Mesh("triangulation produced no interior faces".into()));
    }
    if std::env::var("MESH_DEBUG").is_ok() {
        eprintln!("mesh: {} bnodes, {} interior before split", bnode_pos.len(), accepted.len());
    }

    // The point distribution alone cannot guarantee the size postcondition
    // (Delaunay diagonals at ring seams overshoot by a few percent).
    // Enforce it directly: split any over-sized triangle at its centroid
    // until every element obeys the bound.
    let tri_bound = |tri: &[usize; 3], nodes: &[P2]| -> f64 {
        let mut bound = domain.target_h;
        for s in &plan.sites {
            if tri.iter().all(|&v| dist(nodes[v], s.center) <= s.inner_radius) {
                bound = bound.min(s.min_h);
            }
        }
        bound
    };
    for round in 0.. {
        let mut split: Vec<P2> = Vec::new();
        for tri in &tris {
            let d = dist(nodes[tri[0]], nodes[tri[1]])
                .max(dist(nodes[tri[1]], nodes[tri[2]]))
                .max(dist(nodes[tri[2]], nodes[tri[0]]));
            if d > tri_bound(tri, &nodes) {
                split.push([
                    (nodes[tri[0]][0] + nodes[tri[1]][0] + nodes[tri[2]][0]) / 3.0,
                    (nodes[tri[0]][1] + nodes[tri[1]][1] + nodes[tri[2]][1]) / 3.0,
                ]);
            }
        }
        if std::env::var("MESH_DEBUG").is_ok() {
            eprintln!("mesh: split round {round}: {} violations", split.len());
        }
        if split.is_empty() {
            break;
        }
        if round >= 40 {
            return Err(Error::Mesh(format!(
                "size bound not reached after {round} splitting rounds ({} left)",
                split.len()
            )));
        }
        for p in split {
            cdt.insert(Point2::new(p[0], p[1]))
                .map_err(|e| Error::Mesh(format!("refine insert failed: {e:?}")))?;
            nodes.push(p);
        }
        if cdt.num_vertices() != nodes.len() {
            return Err(Error::Mesh("refine point collided with existing node".into()));
        }
        tris = extract(&cdt, &nodes);
    }

    // --- boundary edges, adjacency, locate acceleration ---
    let n_bnodes = bnode_pos.len();
    let mut bedges = Vec::new();
    for chain in &chains {
        let n = chain.len();
        for i in 0..n {
            bedges.push([chain[i], chain[(i + 1) % n]]);
        }
    }

    let mut edge_map: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    let mut adj = vec![[None; 3]; tris.len()];
    for (t, tri) in tris.iter().enumerate() {
        for e in 0..3 {
            // edge e is opposite vertex e
            let (a, b) = (tri[(e + 1) % 3], tri[(e + 2) % 3]);
            let key = (a.min(b), a.max(b));
            if let Some(&(t2, e2)) = edge_map.get(&key) {
                adj[t][e] = Some(t2);
                adj[t2][e2] = Some(t);
            } else {
                edge_map.insert(key, (t, e));
            }
        }
    }

    let mut node_tri = vec![usize::MAX; nodes.len()];
    for (t, tri) in tris.iter().enumerate() {
        for &v in tri {
            node_tri[v] = t;
        }
    }
    if node_tri.iter().any(|&t| t == usize::MAX) {
        return Err(Error::Mesh("orphan node after culling".into()));
    }

    let grid_cell = domain.target_h.max(1e-12);
    let mut ngrid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in nodes.iter().enumerate() {
        let key = ((p[0] / grid_cell).floor() as i64, (p[1] / grid_cell).floor() as i64);
        ngrid.entry(key).or_default().push(i);
    }

    let mut boundary_s = vec![f64::NAN; nodes.len()];
    let mut bnodes_sorted: Vec<(f64, usize)> = Vec::with_capacity(n_bnodes);
    for i in 0..n_bnodes {
        boundary_s[i] = bnode_s[i];
        bnodes_sorted.push((bnode_s[i], i));
    }
    bnodes_sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let node_weight: Vec<f64> = nodes.iter().map(|&p| domain.conf_weight(p)).collect();

    Ok(Mesh {
        domain: domain.clone(),
        nodes,
        node_weight,
        tris,
        bedges,
        boundary: BoundaryParam { curves, offsets, total_len, nodes: bnodes_sorted },
        boundary_s,
        adj,
        grid: ngrid,
        grid_cell,
        node_tri,
    })
}

/// Conformal chart centered at a source point, normalized so the chart
/// factor vanishes at the source. Interior sources translate; boundary
/// sources additionally straighten the boundary (rigid motion for straight
/// sides, a Moebius map for circular arcs), so radial functions of the
/// chart coordinate have exact zero Neumann data.
#[derive(Debug, Clone)]
pub enum Chart {
    Translate { xi: P2 },
    /// y = R (x - xi) with rotation R mapping the boundary tangent to e1
    /// and the domain to {y2 > 0}.
    Rigid { xi: P2, cos: f64, sin: f64 },
    /// w = 2 r i (z - xi)/(z + xi) in complex notation, for a circle of
    /// radius r about `center`; `flip` selects which side maps up.
    Mobius { center: P2, radius: f64, xi: P2, flip: bool },
}

impl Chart {
    /// Chart for a source at `xi`; `on_boundary` must reflect exact
    /// membership (use boundary_param points for boundary sources).
    pub fn build(shape: &Shape, xi: P2, on_boundary: bool) -> Result<Chart> {
        if !on_boundary {
            let d = shape.signed_dist(xi);
            if d <= 0.0 {
                return Err(Error::OutsideDomain(xi[0], xi[1], d));
            }
            return Ok(Chart::Translate { xi });
        }
        match shape {
            Shape::UnitDisk => {
                Ok(Chart::Mobius { center: [0.0, 0.0], radius: 1.0, xi, flip: false })
            }
            Shape::Annulus { r_in, r_out } => {
                let r = norm(xi);
                if (r - r_out).abs() < (r - r_in).abs() {
                    Ok(Chart::Mobius { center: [0.0, 0.0], radius: *r_out, xi, flip: false })
                } else {
                    Ok(Chart::Mobius { center: [0.0, 0.0], radius: *r_in, xi, flip: true })
                }
            }
            Shape::Rectangle { .. } | Shape::Polygon { .. } => {
                let curves = shape.boundary_curves();
                let c = &curves[0];
                let s = c.project(xi);
                let t = c.tangent_at(s);
                // rotate tangent onto +e1; inward normal (-n) onto +e2
                Ok(Chart::Rigid { xi, cos: t[0], sin: t[1] })
            }
        }
    }

    /// Chart coordinate of `x`.
    pub fn to_local(&self, x: P2) -> P2 {
        match self {
            Chart::Translate { xi } => sub(x, *xi),
            Chart::Rigid { xi, cos, sin } => {
                let d = sub(x, *xi);
                [cos * d[0] + sin * d[1], -sin * d[0] + cos * d[1]]
            }
            Chart::Mobius { center, radius, xi, flip } => {
                // w = 2 r i (xh - z)/(xh + z), complex arithmetic inlined
                let z = sub(x, *center);
                let xh = sub(*xi, *center);
                let num = [xh[0] - z[0], xh[1] - z[1]];
                let den = [xh[0] + z[0], xh[1] + z[1]];
                let d2 = den[0] * den[0] + den[1] * den[1];
                let q = [
                    (num[0] * den[0] + num[1] * den[1]) / d2,
                    (num[1] * den[0] - num[0] * den[1]) / d2,
                ];
                let s = if *flip { -2.0 * radius } else { 2.0 * radius };
                [-s * q[1], s * q[0]]
            }
        }
    }

    /// |dw/dz|^2 at `x`: the Jacobian density relating chart measure to
    /// coordinate measure, equal to e^{-phi_chart}. Identically 1 for the
    /// distance-preserving charts.
    pub fn jac_density(&self, x: P2) -> f64 {
        match self {
            Chart::Translate { .. } | Chart::Rigid { .. } => 1.0,
            Chart::Mobius { center, radius, xi, .. } => {
                let z = sub(x, *center);
                let xh = sub(*xi, *center);
                let den = [xh[0] + z[0], xh[1] + z[1]];
                let d2 = den[0] * den[0] + den[1] * den[1];
                let v = 4.0 * radius * radius / d2;
                v * v
            }
        }
    }
}
