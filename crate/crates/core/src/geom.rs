//! Pixel-space geometry: boxes, polygons and exclusion masks.
//!
//! Everything here works in image coordinates (x to the right, y down) with
//! sub-pixel `f64` values. Integer pixels only show up when rasterizing a mask
//! or extracting a crop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("box must have finite coordinates and positive size, got ({x}, {y}, {w}, {h})")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon vertex {0} is not finite")]
    NonFiniteVertex(usize),
    #[error("polygon is degenerate (zero area or repeated vertices)")]
    Degenerate,
    #[error("polygon edges {0} and {1} intersect")]
    SelfIntersecting(usize, usize),
}

/// A point in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Axis-aligned box stored as top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeomError> {
        let ok = x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0;
        if ok {
            Ok(Self { x, y, w, h })
        } else {
            Err(GeomError::InvalidBox { x, y, w, h })
        }
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeomError> {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Area of the overlap between two boxes (0 when disjoint).
    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    /// Clips the box to `[0, width] x [0, height]`. Returns `None` if nothing
    /// of the box remains inside the frame.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        if self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height {
            return Some(*self);
        }
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(width);
        let y1 = self.bottom().min(height);
        BBox::new(x0, y0, x1 - x0, y1 - y0).ok()
    }

    /// Rounds every coordinate through `f32`, the precision used on disk.
    pub fn quantized(&self) -> BBox {
        let q = |v: f64| v as f32 as f64;
        BBox {
            x: q(self.x),
            y: q(self.y),
            w: q(self.w).max(f32::MIN_POSITIVE as f64),
            h: q(self.h).max(f32::MIN_POSITIVE as f64),
        }
    }

    /// Integer pixel rectangle `(x0, y0, x1, y1)` (exclusive end) covering the
    /// box, clipped to a `width x height` raster. `None` when empty.
    pub fn pixel_rect(&self, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
        let x0 = self.x.floor().max(0.0).min(width as f64) as u32;
        let y0 = self.y.floor().max(0.0).min(height as f64) as u32;
        let x1 = self.right().ceil().max(0.0).min(width as f64) as u32;
        let y1 = self.bottom().ceil().max(0.0).min(height as f64) as u32;
        (x1 > x0 && y1 > y0).then_some((x0, y0, x1, y1))
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeomError;

    fn try_from([x, y, w, h]: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(x, y, w, h)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Simple closed polygon, validated on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolygonRepr", into = "PolygonRepr")]
pub struct Polygon {
    vertices: Vec<Point>,
}

#[derive(Serialize, Deserialize)]
struct PolygonRepr {
    vertices: Vec<Point>,
}

impl TryFrom<PolygonRepr> for Polygon {
    type Error = GeomError;

    fn try_from(repr: PolygonRepr) -> Result<Self, Self::Error> {
        Polygon::new(repr.vertices)
    }
}

impl From<Polygon> for PolygonRepr {
    fn from(p: Polygon) -> Self {
        PolygonRepr { vertices: p.vertices }
    }
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self, GeomError> {
        let n = vertices.len();
        if n < 3 {
            return Err(GeomError::TooFewVertices(n));
        }
        if let Some(i) = vertices.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeomError::NonFiniteVertex(i));
        }
        for i in 0..n {
            if vertices[i] == vertices[(i + 1) % n] {
                return Err(GeomError::Degenerate);
            }
        }
        let (a, b) = (vertices[0], vertices[1]);
        if vertices.iter().all(|p| ((b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)).abs() <= f64::EPSILON) {
            return Err(GeomError::Degenerate);
        }
        check_simple(&vertices)?;
        if signed_area(&vertices).abs() <= f64::EPSILON {
            return Err(GeomError::Degenerate);
        }
        Ok(Self { vertices })
    }

    /// Axis-aligned rectangle polygon, counter-clockwise in screen space.
    pub fn rect(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeomError> {
        Polygon::new(vec![Point::new(x, y), Point::new(x + w, y), Point::new(x + w, y + h), Point::new(x, y + h)])
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.vertices
            .iter()
            .fold((f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |(a, b, c, d), p| {
                (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y))
            })
    }

    pub fn contains(&self, p: Point) -> bool {
        point_in_polygon(p, self)
    }
}

fn signed_area(v: &[Point]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        / 2.0
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test, touching endpoints included.
fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(p1, q1, q2))
        || (d2 == 0.0 && on_segment(p2, q1, q2))
        || (d3 == 0.0 && on_segment(q1, p1, p2))
        || (d4 == 0.0 && on_segment(q2, p1, p2))
}

fn check_simple(v: &[Point]) -> Result<(), GeomError> {
    let n = v.len();
    for i in 0..n {
        let (a1, a2) = (v[i], v[(i + 1) % n]);
        for j in (i + 1)..n {
            let (b1, b2) = (v[j], v[(j + 1) % n]);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // Neighbouring edges share one vertex; they may only overlap there.
                let (shared, a_far, b_far) = if j == i + 1 { (a2, a1, b2) } else { (a1, a2, b1) };
                let folded = cross(shared, a_far, b_far) == 0.0
                    && (a_far.x - shared.x) * (b_far.x - shared.x) + (a_far.y - shared.y) * (b_far.y - shared.y) > 0.0;
                if folded {
                    return Err(GeomError::SelfIntersecting(i, j));
                }
            } else if segments_intersect(a1, a2, b1, b2) {
                return Err(GeomError::SelfIntersecting(i, j));
            }
        }
    }
    Ok(())
}

fn point_on_edge(p: Point, a: Point, b: Point) -> bool {
    let len = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
    let tol = 1e-9 * len.max(1.0);
    cross(a, b, p).abs() <= tol * len.max(1.0) && on_segment_tol(p, a, b, tol)
}

fn on_segment_tol(p: Point, a: Point, b: Point, tol: f64) -> bool {
    p.x >= a.x.min(b.x) - tol && p.x <= a.x.max(b.x) + tol && p.y >= a.y.min(b.y) - tol && p.y <= a.y.max(b.y) + tol
}

/// Even-odd membership test; points on the boundary count as inside.
pub fn point_in_polygon(p: Point, poly: &Polygon) -> bool {
    let mut inside = false;
    for (a, b) in poly.edges() {
        if point_on_edge(p, a, b) {
            return true;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// One bit per pixel; a set bit marks a pixel excluded from processing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRaster {
    width: u32,
    height: u32,
    bits: Vec<u64>,
}

impl MaskRaster {
    /// All-clear mask. Panics if either dimension is zero.
    pub fn new(width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        let n = width as usize * height as usize;
        Self { width, height, bits: vec![0; n.div_ceil(64)] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn is_excluded(&self, x: u32, y: u32) -> bool {
        if x >= self.width || y >= self.height {
            return false;
        }
        let i = self.index(x, y);
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set_excluded(&mut self, x: u32, y: u32) {
        let i = self.index(x, y);
        self.bits[i / 64] |= 1 << (i % 64);
    }

    pub fn excluded_count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Whether the pixel under a sub-pixel point is excluded. Points outside
    /// the raster are never excluded.
    pub fn excludes_point(&self, p: Point) -> bool {
        if !(p.x >= 0.0 && p.y >= 0.0) {
            return false;
        }
        let (x, y) = (p.x.floor(), p.y.floor());
        if x >= self.width as f64 || y >= self.height as f64 {
            return false;
        }
        self.is_excluded(x as u32, y as u32)
    }
}

/// Rasterizes exclusion polygons: a pixel is excluded iff its center lies in
/// any polygon. Parts of polygons outside the frame are ignored.
pub fn rasterize_mask(polys: &[Polygon], width: u32, height: u32) -> MaskRaster {
    let mut mask = MaskRaster::new(width, height);
    for poly in polys {
        let (min_x, min_y, max_x, max_y) = poly.bounds();
        let x_lo = (min_x - 0.5).ceil().max(0.0);
        let y_lo = (min_y - 0.5).ceil().max(0.0);
        let x_hi = (max_x - 0.5).floor().min(width as f64 - 1.0);
        let y_hi = (max_y - 0.5).floor().min(height as f64 - 1.0);
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        for py in y_lo as u32..=y_hi as u32 {
            for px in x_lo as u32..=x_hi as u32 {
                if point_in_polygon(Point::new(px as f64 + 0.5, py as f64 + 0.5), poly) {
                    mask.set_excluded(px, py);
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn square4() -> Polygon {
        Polygon::rect(0.0, 0.0, 4.0, 4.0).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(0.0, 0.0, 2.0, 2.0)), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(10.0, 10.0, 2.0, 2.0)), 0.0);
        // inter = 1, union = 4 + 4 - 1
        let v = iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 1.0, 2.0, 2.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(2.0, 0.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn center_examples() {
        assert_eq!(b(0.0, 0.0, 2.0, 2.0).center(), Point::new(1.0, 1.0));
        assert_eq!(b(10.0, 20.0, 4.0, 6.0).center(), Point::new(12.0, 23.0));
        assert_eq!(b(0.0, 0.0, 1.0, 1.0).center(), Point::new(0.5, 0.5));
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0,0,0,5]").is_err());
    }

    #[test]
    fn clip_to_frame() {
        let c = b(-5.0, 10.0, 20.0, 100.0).clip(100.0, 50.0).unwrap();
        assert_eq!(c.to_array(), [0.0, 10.0, 15.0, 40.0]);
        assert!(b(200.0, 0.0, 5.0, 5.0).clip(100.0, 50.0).is_none());
    }

    #[test]
    fn point_in_square() {
        let sq = square4();
        assert!(point_in_polygon(Point::new(1.0, 1.0), &sq));
        assert!(!point_in_polygon(Point::new(5.0, 5.0), &sq));
        assert!(point_in_polygon(Point::new(4.0, 2.0), &sq));
        assert!(point_in_polygon(Point::new(0.0, 0.0), &sq));
        assert!(!point_in_polygon(Point::new(4.000001, 2.0), &sq));
    }

    #[test]
    fn concave_polygon_membership() {
        // U shape opening upwards
        let u = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 2.0),
            Point::new(2.0, 2.0),
            Point::new(2.0, 0.0),
            Point::new(3.0, 0.0),
            Point::new(3.0, 3.0),
            Point::new(0.0, 3.0),
        ])
        .unwrap();
        assert!(!u.contains(Point::new(1.5, 1.0)));
        assert!(u.contains(Point::new(0.5, 1.0)));
        assert!(u.contains(Point::new(1.5, 2.5)));
    }

    #[test]
    fn polygon_validation() {
        assert_eq!(Polygon::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)]), Err(GeomError::TooFewVertices(2)));
        let bowtie =
            Polygon::new(vec![Point::new(0.0, 0.0), Point::new(2.0, 2.0), Point::new(2.0, 0.0), Point::new(0.0, 2.0)]);
        assert!(matches!(bowtie, Err(GeomError::SelfIntersecting(_, _))));
        let collinear = Polygon::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 1.0), Point::new(2.0, 2.0)]);
        assert_eq!(collinear, Err(GeomError::Degenerate));
        // spike folding back over its previous edge
        let spike = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(4.0, 0.0),
            Point::new(4.0, 4.0),
            Point::new(4.0, 2.0),
            Point::new(0.0, 4.0),
        ]);
        assert!(matches!(spike, Err(GeomError::SelfIntersecting(_, _))));
    }

    #[test]
    fn polygon_json_schema() {
        let p: Polygon = serde_json::from_str(r#"{"vertices": [[0,0],[4,0],[4,4],[0,4]]}"#).unwrap();
        assert_eq!(p, square4());
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"vertices":[[0.0,0.0],[4.0,0.0],[4.0,4.0],[0.0,4.0]]}"#);
        assert!(serde_json::from_str::<Polygon>(r#"{"vertices": [[0,0],[2,2],[2,0],[0,2]]}"#).is_err());
    }

    #[test]
    fn rasterize_examples() {
        assert_eq!(rasterize_mask(&[], 4, 4).excluded_count(), 0);
        let full = Polygon::rect(0.0, 0.0, 4.0, 4.0).unwrap();
        assert_eq!(rasterize_mask(&[full], 4, 4).excluded_count(), 16);
        // left half: pixel centers x = 0.5, 1.5 inside; 8 pixels
        let half = Polygon::rect(0.0, 0.0, 2.0, 4.0).unwrap();
        let m = rasterize_mask(&[half], 4, 4);
        assert_eq!(m.excluded_count(), 8);
        assert!(m.is_excluded(1, 3));
        assert!(!m.is_excluded(2, 0));
    }

    #[test]
    fn rasterize_clips_outside_polygons() {
        let outside = Polygon::rect(-10.0, -10.0, 5.0, 5.0).unwrap();
        assert_eq!(rasterize_mask(&[outside], 4, 4).excluded_count(), 0);
        let straddle = Polygon::rect(-10.0, -10.0, 12.0, 100.0).unwrap();
        assert_eq!(rasterize_mask(&[straddle], 4, 4).excluded_count(), 8);
    }

    #[test]
    fn mask_point_lookup() {
        let m = rasterize_mask(&[Polygon::rect(0.0, 0.0, 2.0, 2.0).unwrap()], 4, 4);
        assert!(m.excludes_point(Point::new(1.9, 0.1)));
        assert!(!m.excludes_point(Point::new(2.1, 0.1)));
        assert!(!m.excludes_point(Point::new(-1.0, 0.0)));
        assert!(!m.excludes_point(Point::new(40.0, 0.0)));
    }
}
