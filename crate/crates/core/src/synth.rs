//! Synthetic scenes with exact ground truth, used by tests, benchmarks and
//! the demo commands.

use image::{Rgb, RgbImage};

use crate::detect::{Detection, FrameIndex, GtRecord, VehicleClass, VideoInfo};
use crate::geom::BBox;

#[derive(Debug, Clone)]
pub struct Scene {
    pub info: VideoInfo,
    pub detections: Vec<Detection>,
    pub gt: Vec<GtRecord>,
    /// Rendered frames, for scenes that need pixels.
    pub frames: Option<Vec<RgbImage>>,
}

impl Scene {
    pub fn detections_at(&self, frame: FrameIndex) -> Vec<Detection> {
        self.detections.iter().filter(|d| d.frame == frame).copied().collect()
    }
}

/// `lanes` vehicles on separate horizontal lanes moving right at constant,
/// distinct speeds; detections equal ground truth. Classes cycle through
/// car, truck, bus. Every vehicle crosses the strip `x in [600, 800]`.
pub fn linear_lanes(lanes: u32, frames: u32) -> Scene {
    let (w, h) = (40.0, 30.0);
    let mut detections = Vec::new();
    let mut gt = Vec::new();
    let classes = [VehicleClass::Car, VehicleClass::Truck, VehicleClass::Bus];
    for i in 0..lanes {
        let cls = classes[(i % 3) as usize];
        let y = 20.0 + 60.0 * i as f64;
        let speed = 2.0 + 0.5 * i as f64;
        let cx0 = 300.0 - 20.0 * i as f64;
        for f in 0..frames {
            let bbox = BBox::from_center(cx0 + speed * f as f64, y + h / 2.0, w, h).expect("valid box");
            detections.push(Detection { frame: f, cls, score: 0.9, bbox });
            gt.push(GtRecord { frame: f, gt_id: i + 1, cls, bbox });
        }
    }
    detections.sort_by_key(|d| d.frame);
    gt.sort_by_key(|g| (g.frame, g.gt_id));
    let height = (60 * lanes + 40).max(100);
    Scene {
        info: VideoInfo { frame_count: frames, width: 1600, height, nominal_fps: 30.0 },
        detections,
        gt,
        frames: None,
    }
}

/// One car that brakes to a stop while partly occluded: its detection score
/// drops to 0.3 for frames 10..=12 and recovers at frame 13. A tracker that
/// ignores low-score detections loses it and mispredicts its position.
pub fn braking_occlusion() -> Scene {
    let xs = |f: u32| -> f64 {
        match f {
            0..=9 => 10.0 + 10.0 * f as f64,
            10 => 106.0,
            11 => 109.0,
            _ => 110.0,
        }
    };
    let mut detections = Vec::new();
    let mut gt = Vec::new();
    for f in 0..20 {
        let bbox = BBox::new(xs(f), 50.0, 40.0, 30.0).expect("valid box");
        let score = if (10..=12).contains(&f) { 0.3 } else { 0.9 };
        detections.push(Detection { frame: f, cls: VehicleClass::Car, score, bbox });
        gt.push(GtRecord { frame: f, gt_id: 1, cls: VehicleClass::Car, bbox });
    }
    Scene {
        info: VideoInfo { frame_count: 20, width: 320, height: 160, nominal_fps: 30.0 },
        detections,
        gt,
        frames: None,
    }
}

pub const RED: [u8; 3] = [220, 20, 20];
pub const BLUE: [u8; 3] = [20, 20, 220];
pub const BACKGROUND: [u8; 3] = [128, 128, 128];

/// Two same-size cars, red (gt 1) and blue (gt 2), approach each other on
/// rows 15 px apart, meet at frame 10 and bounce back at 11 px per frame.
/// After the meeting each car's constant-velocity prediction overlaps the
/// other car more than its own, so IoU alone prefers swapping identities.
/// The jump is large, so association needs an IoU gate near 0.2. Red is
/// drawn on top.
pub fn bouncing_pair() -> Scene {
    let frames = 21;
    let (w, h) = (40.0, 30.0);
    let off = |f: u32| 11.0 * (10.0 - f as f64).abs();
    let mut detections = Vec::new();
    let mut gt = Vec::new();
    let mut rasters = Vec::new();
    for f in 0..frames {
        let red = BBox::new(200.0 - off(f), 100.0, w, h).expect("valid box");
        let blue = BBox::new(200.0 + off(f), 115.0, w, h).expect("valid box");
        let mut img = RgbImage::from_pixel(640, 240, Rgb(BACKGROUND));
        fill(&mut img, &blue, BLUE);
        fill(&mut img, &red, RED);
        rasters.push(img);
        for (id, b) in [(1, red), (2, blue)] {
            detections.push(Detection { frame: f, cls: VehicleClass::Car, score: 0.9, bbox: b });
            gt.push(GtRecord { frame: f, gt_id: id, cls: VehicleClass::Car, bbox: b });
        }
    }
    Scene {
        info: VideoInfo { frame_count: frames, width: 640, height: 240, nominal_fps: 30.0 },
        detections,
        gt,
        frames: Some(rasters),
    }
}

/// Paints the pixels covered by `b`.
pub fn fill(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    if let Some((x0, y0, x1, y1)) = b.pixel_rect(img.width(), img.height()) {
        for y in y0..y1 {
            for x in x0..x1 {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::iou;

    #[test]
    fn lanes_never_overlap() {
        let s = linear_lanes(10, 200);
        for f in 0..200 {
            let d = s.detections_at(f);
            assert_eq!(d.len(), 10);
            for a in 0..d.len() {
                for b in a + 1..d.len() {
                    assert_eq!(iou(&d[a].bbox, &d[b].bbox), 0.0);
                }
            }
            assert!(d.iter().all(|x| x.bbox.right() <= s.info.width as f64 && x.bbox.bottom() <= s.info.height as f64));
        }
    }

    #[test]
    fn bouncing_pair_meets_at_frame_ten() {
        let s = bouncing_pair();
        let d = s.detections_at(10);
        assert_eq!(d[0].bbox.x(), d[1].bbox.x());
        let img = &s.frames.as_ref().unwrap()[10];
        assert_eq!(img.get_pixel(210, 105).0, RED);
        assert_eq!(img.get_pixel(210, 140).0, BLUE);
    }
}
