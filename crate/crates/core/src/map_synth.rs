//! Procedural orthophoto maps and nadir camera rendering.
//!
//! Maps are grayscale rasters built from ground patches, roads, buildings
//! and trees. Buildings and trees are recorded in an occluder mask so that
//! rendered views can cast hard drop-shadows along a configurable sun
//! azimuth; flipping the azimuth by 180 degrees moves every shadow to the
//! other side of its object.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_sidecar, write_sidecar, Image, Sidecar};

/// Output width of every rendered view in pixels.
pub const VIEW_WIDTH: usize = 320;
/// Output height of every rendered view in pixels.
pub const VIEW_HEIGHT: usize = 160;
/// Multiplicative darkening inside cast shadows.
pub const SHADOW_FACTOR: f32 = 0.5;

/// Wrap an angle in degrees into `(-180, 180]`.
pub fn normalize_deg(a: f64) -> f64 {
    let mut r = a % 360.0;
    if r <= -180.0 {
        r += 360.0;
    } else if r > 180.0 {
        r -= 360.0;
    }
    r
}

/// Planar pose in the map frame. Heading is in degrees counter-clockwise
/// from the map +y axis, so heading 0 looks along +y and heading 90 along -x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        PlanarPose {
            x,
            y,
            heading: normalize_deg(heading),
        }
    }

    /// Unit vector the camera's image-up direction points along.
    pub fn forward(&self) -> (f64, f64) {
        let (s, c) = self.heading.to_radians().sin_cos();
        (-s, c)
    }

    /// Unit vector along the image's +column direction.
    pub fn right(&self) -> (f64, f64) {
        let (s, c) = self.heading.to_radians().sin_cos();
        (c, s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub width_px: usize,
    pub height_px: usize,
    pub meters_per_pixel: f64,
    /// World coordinates of the raster's lower-left corner.
    pub origin_x: f64,
    pub origin_y: f64,
    pub background: f32,
    pub ground_patches: usize,
    /// Radius range in meters.
    pub patch_radius: (f64, f64),
    pub roads: usize,
    pub road_width: (f64, f64),
    pub buildings: usize,
    /// Side-length range in meters.
    pub building_size: (f64, f64),
    pub trees: usize,
    pub tree_radius: (f64, f64),
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams::with_density(2048, 2048, 0.25)
    }
}

impl SceneParams {
    /// Object counts scaled to the covered area: a mix of built-up blocks,
    /// roads, tree clusters and grass patches.
    pub fn with_density(width_px: usize, height_px: usize, meters_per_pixel: f64) -> Self {
        let hectares = width_px as f64 * height_px as f64 * meters_per_pixel.powi(2) / 1e4;
        let per_ha = |d: f64| (d * hectares).round() as usize;
        SceneParams {
            width_px,
            height_px,
            meters_per_pixel,
            origin_x: 0.0,
            origin_y: 0.0,
            background: 0.45,
            ground_patches: per_ha(30.0),
            patch_radius: (3.0, 12.0),
            roads: ((hectares.sqrt() * 1.5).round() as usize).max(1),
            road_width: (3.0, 7.0),
            buildings: per_ha(20.0),
            building_size: (4.0, 16.0),
            trees: per_ha(45.0),
            tree_radius: (1.2, 3.5),
        }
    }

    /// A scene with no objects at all.
    pub fn empty(width_px: usize, height_px: usize, meters_per_pixel: f64) -> Self {
        SceneParams {
            ground_patches: 0,
            roads: 0,
            buildings: 0,
            trees: 0,
            ..SceneParams::with_density(width_px, height_px, meters_per_pixel)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::InvalidArgument(format!(
                "map dimensions must be positive, got {}x{}",
                self.width_px, self.height_px
            )));
        }
        if !(self.meters_per_pixel.is_finite() && self.meters_per_pixel > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "meters_per_pixel must be positive, got {}",
                self.meters_per_pixel
            )));
        }
        for (name, (lo, hi)) in [
            ("patch_radius", self.patch_radius),
            ("road_width", self.road_width),
            ("building_size", self.building_size),
            ("tree_radius", self.tree_radius),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::InvalidArgument(format!(
                    "{name} range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::InvalidArgument(format!(
                "background intensity must lie in [0, 1], got {}",
                self.background
            )));
        }
        Ok(())
    }
}

/// Synthetic orthophoto with its ground-truth scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MapRaster {
    pub meters_per_pixel: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub seed: u64,
    pub pixels: Image,
    /// 1 where a shadow-casting object (building or tree) covers the pixel.
    pub occluders: Vec<u8>,
    pub scene: SceneParams,
}

impl MapRaster {
    pub fn width_px(&self) -> usize {
        self.pixels.width()
    }

    pub fn height_px(&self) -> usize {
        self.pixels.height()
    }

    pub fn width_m(&self) -> f64 {
        self.width_px() as f64 * self.meters_per_pixel
    }

    pub fn height_m(&self) -> f64 {
        self.height_px() as f64 * self.meters_per_pixel
    }

    /// World point to continuous pixel coordinates (rows grow downwards).
    #[inline]
    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let u = (x - self.origin_x) / self.meters_per_pixel;
        let v = self.height_px() as f64 - (y - self.origin_y) / self.meters_per_pixel;
        (u, v)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.origin_x
            && y >= self.origin_y
            && x <= self.origin_x + self.width_m()
            && y <= self.origin_y + self.height_m()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.origin_x + self.width_m() / 2.0,
            self.origin_y + self.height_m() / 2.0,
        )
    }

    #[inline]
    fn occluded(&self, u: f64, v: f64) -> bool {
        if u < 0.0 || v < 0.0 {
            return false;
        }
        let (c, r) = (u as usize, v as usize);
        c < self.width_px() && r < self.height_px() && self.occluders[r * self.width_px() + c] != 0
    }

    /// Writes `<stem>.png`, `<stem>.json` and `<stem>_occluders.png`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let png = dir.join(format!("{stem}.png"));
        self.pixels.save_png(&png)?;
        let mask = Image::from_u8(
            self.width_px(),
            self.height_px(),
            &self.occluders.iter().map(|&m| m * 255).collect::<Vec<_>>(),
        )?;
        mask.save_png(dir.join(format!("{stem}_occluders.png")))?;
        write_sidecar(
            &png,
            &Sidecar {
                width_px: self.width_px(),
                height_px: self.height_px(),
                meters_per_pixel: self.meters_per_pixel,
                origin_x: self.origin_x,
                origin_y: self.origin_y,
                heading_deg: None,
                seed: Some(self.seed),
                extra: serde_json::to_value(&self.scene)?,
            },
        )
    }

    /// Loads a map written by [`MapRaster::save`]. Intensities come back
    /// quantized to 8 bits.
    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let png = dir.join(format!("{stem}.png"));
        let side = read_sidecar(&png)?;
        let pixels = Image::load_png(&png)?;
        if pixels.width() != side.width_px || pixels.height() != side.height_px {
            return Err(Error::format(format!(
                "{}: sidecar says {}x{}, image is {}x{}",
                png.display(),
                side.width_px,
                side.height_px,
                pixels.width(),
                pixels.height()
            )));
        }
        let mask_path = dir.join(format!("{stem}_occluders.png"));
        let mask = Image::load_png(&mask_path)?;
        if mask.width() != pixels.width() || mask.height() != pixels.height() {
            return Err(Error::format(format!(
                "{}: occluder mask size differs from the map",
                mask_path.display()
            )));
        }
        let scene = if side.extra.is_null() {
            SceneParams::empty(side.width_px, side.height_px, side.meters_per_pixel)
        } else {
            serde_json::from_value(side.extra.clone())?
        };
        Ok(MapRaster {
            meters_per_pixel: side.meters_per_pixel,
            origin_x: side.origin_x,
            origin_y: side.origin_y,
            seed: side.seed.unwrap_or(0),
            occluders: mask
                .to_u8()
                .into_iter()
                .map(|b| u8::from(b > 127))
                .collect(),
            pixels,
            scene,
        })
    }
}

struct Canvas<'a> {
    w: usize,
    h: usize,
    mpp: f64,
    pix: &'a mut [f32],
    mask: &'a mut [u8],
}

impl Canvas<'_> {
    /// Blend `color` into every pixel of the bounding box where `alpha`
    /// (evaluated at the pixel center in meters from the lower-left corner)
    /// is positive.
    fn paint(
        &mut self,
        bbox: (f64, f64, f64, f64),
        color: f32,
        occluder: bool,
        alpha: impl Fn(f64, f64) -> f64,
    ) {
        let (x0, y0, x1, y1) = bbox;
        let c0 = ((x0 / self.mpp).floor().max(0.0)) as usize;
        let c1 = ((x1 / self.mpp).ceil().max(0.0) as usize).min(self.w);
        // Rows are measured from the top.
        let r0 = ((self.h as f64 - y1 / self.mpp).floor().max(0.0)) as usize;
        let r1 = ((self.h as f64 - y0 / self.mpp).ceil().max(0.0) as usize).min(self.h);
        for r in r0..r1 {
            let y = (self.h as f64 - r as f64 - 0.5) * self.mpp;
            for c in c0..c1 {
                let x = (c as f64 + 0.5) * self.mpp;
                let a = alpha(x, y).clamp(0.0, 1.0) as f32;
                if a <= 0.0 {
                    continue;
                }
                let i = r * self.w + c;
                self.pix[i] = self.pix[i] * (1.0 - a) + color * a;
                if occluder && a >= 0.5 {
                    self.mask[i] = 1;
                }
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Generate a deterministic map from scene parameters and a seed.
pub fn generate_map(scene: &SceneParams, seed: u64) -> Result<MapRaster> {
    scene.validate()?;
    let (w, h, mpp) = (scene.width_px, scene.height_px, scene.meters_per_pixel);
    let (wm, hm) = (w as f64 * mpp, h as f64 * mpp);
    let mut pixels = vec![scene.background; w * h];
    let mut occluders = vec![0u8; w * h];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = Canvas {
        w,
        h,
        mpp,
        pix: &mut pixels,
        mask: &mut occluders,
    };

    // Soft grass and soil patches.
    for _ in 0..scene.ground_patches {
        let (cx, cy) = (rng.random_range(0.0..wm), rng.random_range(0.0..hm));
        let radius = uniform(&mut rng, scene.patch_radius);
        let color = (scene.background + rng.random_range(-0.15f32..0.15)).clamp(0.0, 1.0);
        let soft = radius * 0.4;
        let reach = radius + soft;
        canvas.paint(
            (cx - reach, cy - reach, cx + reach, cy + reach),
            color,
            false,
            |x, y| {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                0.5 + (radius - d) / (2.0 * soft)
            },
        );
    }

    // Roads as random-walk polylines.
    for _ in 0..scene.roads {
        let width = uniform(&mut rng, scene.road_width);
        let color = rng.random_range(0.18f32..0.32);
        let mut p = (rng.random_range(0.0..wm), rng.random_range(0.0..hm));
        let mut dir = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 0..5 {
            let len = rng.random_range(40.0..140.0);
            let q = (p.0 + len * dir.cos(), p.1 + len * dir.sin());
            let half = width / 2.0;
            let reach = half + mpp;
            let (a, b) = (p, q);
            canvas.paint(
                (
                    a.0.min(b.0) - reach,
                    a.1.min(b.1) - reach,
                    a.0.max(b.0) + reach,
                    a.1.max(b.1) + reach,
                ),
                color,
                false,
                |x, y| 0.5 + (half - segment_distance(x, y, a, b)) / mpp,
            );
            p = q;
            dir += rng.random_range(-0.7..0.7);
        }
    }

    // Buildings: rotated rectangles, half of them with a rooftop structure.
    for _ in 0..scene.buildings {
        let (cx, cy) = (rng.random_range(0.0..wm), rng.random_range(0.0..hm));
        let hx = uniform(&mut rng, scene.building_size) / 2.0;
        let hy = uniform(&mut rng, scene.building_size) / 2.0;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let color = rng.random_range(0.55f32..0.95);
        let roof = rng.random_bool(0.5).then(|| {
            (
                rng.random_range(0.3..0.6),
                rng.random_range(0.3..0.6),
                rng.random_range(0.3f32..0.9),
            )
        });
        let (s, c) = angle.sin_cos();
        let reach = hx.hypot(hy) + mpp;
        let rect = |hx: f64, hy: f64| {
            move |x: f64, y: f64| {
                let (dx, dy) = (x - cx, y - cy);
                let lx = dx * c + dy * s;
                let ly = -dx * s + dy * c;
                0.5 + (hx - lx.abs()).min(hy - ly.abs()) / mpp
            }
        };
        let bbox = (cx - reach, cy - reach, cx + reach, cy + reach);
        canvas.paint(bbox, color, true, rect(hx, hy));
        if let Some((fx, fy, roof_color)) = roof {
            canvas.paint(bbox, roof_color, true, rect(hx * fx, hy * fy));
        }
    }

    // Trees: dark soft-edged disks.
    for _ in 0..scene.trees {
        let (cx, cy) = (rng.random_range(0.0..wm), rng.random_range(0.0..hm));
        let radius = uniform(&mut rng, scene.tree_radius);
        let color = rng.random_range(0.08f32..0.24);
        let soft = 0.5f64.max(mpp);
        let reach = radius + soft;
        canvas.paint(
            (cx - reach, cy - reach, cx + reach, cy + reach),
            color,
            true,
            |x, y| {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                0.5 + (radius - d) / soft
            },
        );
    }

    Ok(MapRaster {
        meters_per_pixel: mpp,
        origin_x: scene.origin_x,
        origin_y: scene.origin_y,
        seed,
        pixels: Image::new(w, h, pixels)?,
        occluders,
        scene: scene.clone(),
    })
}

/// Photometric conditions applied when rendering a view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LightingSpec {
    /// Direction towards the sun, degrees counter-clockwise from map +y.
    pub sun_azimuth: f64,
    /// Ground length of drop-shadows in meters. Zero disables shadows.
    pub shadow_length: f64,
    pub brightness_gain: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

/// Sun azimuth used for the reference imagery.
pub const REFERENCE_SUN_AZIMUTH: f64 = 135.0;
/// Shadow length used for the reference imagery.
pub const REFERENCE_SHADOW_LENGTH: f64 = 5.0;

impl Default for LightingSpec {
    fn default() -> Self {
        LightingSpec {
            sun_azimuth: REFERENCE_SUN_AZIMUTH,
            shadow_length: 0.0,
            brightness_gain: 1.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }
}

impl LightingSpec {
    /// Lighting of the reference (map-side) imagery.
    pub fn reference() -> Self {
        LightingSpec {
            shadow_length: REFERENCE_SHADOW_LENGTH,
            ..LightingSpec::default()
        }
    }

    /// Same conditions with the sun on the opposite side.
    pub fn flipped(self) -> Self {
        LightingSpec {
            sun_azimuth: normalize_deg(self.sun_azimuth + 180.0),
            ..self
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.sun_azimuth.is_finite()
            && self.shadow_length >= 0.0
            && self.brightness_gain > 0.0
            && self.gamma > 0.0
            && self.noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid lighting spec {self:?}"
            )))
        }
    }
}

/// Orthographic nadir camera. Output is always 320x160.
///
/// The default 64x32 m footprint (0.2 m per output pixel) roughly matches a
/// wide-angle camera at 40 m altitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub out_width_px: usize,
    pub out_height_px: usize,
    /// Ground extent along the image rows (the pose's right axis), meters.
    pub footprint_width: f64,
    /// Ground extent along the image columns (the pose's forward axis), meters.
    pub footprint_height: f64,
}

impl CameraSpec {
    pub fn new(footprint_width: f64, footprint_height: f64) -> Self {
        CameraSpec {
            out_width_px: VIEW_WIDTH,
            out_height_px: VIEW_HEIGHT,
            footprint_width,
            footprint_height,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.out_width_px != VIEW_WIDTH || self.out_height_px != VIEW_HEIGHT {
            return Err(Error::InvalidArgument(format!(
                "camera output must be {VIEW_WIDTH}x{VIEW_HEIGHT}, got {}x{}",
                self.out_width_px, self.out_height_px
            )));
        }
        if !(self.footprint_width > 0.0 && self.footprint_height > 0.0) {
            return Err(Error::InvalidArgument(
                "camera footprint must be positive".into(),
            ));
        }
        Ok(())
    }

    /// World coordinates of the four footprint corners.
    pub fn footprint_corners(&self, pose: &PlanarPose) -> [(f64, f64); 4] {
        let (fx, fy) = pose.forward();
        let (rx, ry) = pose.right();
        let (a, b) = (self.footprint_width / 2.0, self.footprint_height / 2.0);
        [(-a, -b), (a, -b), (a, b), (-a, b)]
            .map(|(da, db)| (pose.x + da * rx + db * fx, pose.y + da * ry + db * fy))
    }
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec::new(64.0, 32.0)
    }
}

/// Render the nadir view at `pose`.
pub fn render_view(
    map: &MapRaster,
    pose: &PlanarPose,
    cam: &CameraSpec,
    light: &LightingSpec,
) -> Result<Image> {
    cam.validate()?;
    light.validate()?;
    let pose = PlanarPose::new(pose.x, pose.y, pose.heading);
    if cam
        .footprint_corners(&pose)
        .iter()
        .any(|&(x, y)| !map.contains(x, y))
    {
        return Err(Error::FootprintOutOfBounds {
            x: pose.x,
            y: pose.y,
            heading: pose.heading,
        });
    }

    let (w, h) = (cam.out_width_px, cam.out_height_px);
    let (fx, fy) = pose.forward();
    let (rx, ry) = pose.right();
    let mpp = map.meters_per_pixel;
    let (sun_s, sun_c) = light.sun_azimuth.to_radians().sin_cos();
    // Shadow offset in pixel units: step towards the sun.
    let shadow = (light.shadow_length > 0.0).then(|| {
        (
            -sun_s * light.shadow_length / mpp,
            -sun_c * light.shadow_length / mpp,
        )
    });
    let photometric = light.brightness_gain != 1.0 || light.gamma != 1.0 || light.noise_sigma > 0.0;
    let noise = (light.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, light.noise_sigma).expect("validated sigma"));
    let mut rng = ChaCha8Rng::seed_from_u64(light.noise_seed);

    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        let b = (0.5 - (r as f64 + 0.5) / h as f64) * cam.footprint_height;
        for c in 0..w {
            let a = ((c as f64 + 0.5) / w as f64 - 0.5) * cam.footprint_width;
            let x = pose.x + a * rx + b * fx;
            let y = pose.y + a * ry + b * fy;
            let (u, v) = map.world_to_pixel(x, y);
            let mut val = map.pixels.sample_bilinear(u, v);
            if let Some((du, dv)) = shadow {
                if !map.occluded(u, v) && map.occluded(u + du, v + dv) {
                    val *= SHADOW_FACTOR;
                }
            }
            if photometric {
                let mut g = ((val as f64) * light.brightness_gain).clamp(0.0, 1.0);
                if light.gamma != 1.0 {
                    g = g.powf(light.gamma);
                }
                if let Some(n) = &noise {
                    g += n.sample(&mut rng);
                }
                val = g.clamp(0.0, 1.0) as f32;
            }
            out.push(val.clamp(0.0, 1.0));
        }
    }
    Image::new(w, h, out)
}
