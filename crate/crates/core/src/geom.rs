//! Subsurface geometry sampling and rasterization.
//!
//! A geometry is a dipped shale band embedded in permeable rock. The single
//! sampled parameter is the dip angle; band thickness, depth, and the domain
//! box are fixed per run. Geometries are rasterized twice: once at image
//! resolution for the surrogate models (pixel centers) and once at FEM mesh
//! resolution for the solver (element centroids).
//!
//! Coordinates are meters with `y = 0` at the bottom of the domain and
//! `y = depth` at the ground surface. Raster row 0 is the ground surface.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Class id for the permeable host rock.
pub const ROCK: u8 = 0;
/// Class id for the shale band.
pub const SHALE: u8 = 1;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("requested an empty batch of geometries")]
    EmptyRequest,
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("layer at dip {dip_deg} degrees misses the domain entirely")]
    BandOutsideDomain { dip_deg: f64 },
    #[error("layer at dip {dip_deg} degrees covers the whole domain")]
    BandCoversDomain { dip_deg: f64 },
    #[error("invalid material definition: {0}")]
    InvalidMaterial(String),
}

/// The rectangular cross-section and its raster resolution.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DomainSpec {
    /// Horizontal extent in meters.
    pub width: f64,
    /// Vertical extent in meters; the top edge is the ground surface.
    pub depth: f64,
    /// Raster width in pixels.
    pub raster_w: usize,
    /// Raster height in pixels.
    pub raster_h: usize,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self { width: 100.0, depth: 50.0, raster_w: 96, raster_h: 48 }
    }
}

impl DomainSpec {
    pub fn new(width: f64, depth: f64, raster_w: usize, raster_h: usize) -> Result<Self, GeomError> {
        let spec = Self { width, depth, raster_w, raster_h };
        spec.validate()?;
        Ok(spec)
    }

    /// Raster dimensions must divide by 16 so the image survives four 2x
    /// downsamplings in the encoder stacks.
    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.width > 0.0) || !(self.depth > 0.0) {
            return Err(GeomError::InvalidDomain(format!(
                "width and depth must be positive, got {} x {}",
                self.width, self.depth
            )));
        }
        if self.raster_w == 0 || self.raster_h == 0 || self.raster_w % 16 != 0 || self.raster_h % 16 != 0 {
            return Err(GeomError::InvalidDomain(format!(
                "raster {}x{} must be nonzero and divisible by 16",
                self.raster_w, self.raster_h
            )));
        }
        Ok(())
    }
}

/// A shale band: a slab of fixed thickness rotated about the domain center.
///
/// `depth_to_top` is the distance from the ground surface down to the top of
/// the band in the unrotated (zero-dip) configuration, i.e. measured at the
/// domain mid-width.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LayerSpec {
    pub dip_deg: f64,
    pub thickness: f64,
    pub depth_to_top: f64,
}

impl Default for LayerSpec {
    fn default() -> Self {
        Self { dip_deg: 0.0, thickness: 8.0, depth_to_top: 20.0 }
    }
}

impl LayerSpec {
    pub fn with_dip(dip_deg: f64) -> Self {
        Self { dip_deg, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(0.0..=45.0).contains(&self.dip_deg) {
            return Err(GeomError::InvalidLayer(format!(
                "dip angle {} outside [0, 45] degrees",
                self.dip_deg
            )));
        }
        if !(self.thickness > 0.0) {
            return Err(GeomError::InvalidLayer("thickness must be positive".into()));
        }
        if self.depth_to_top < 0.0 {
            return Err(GeomError::InvalidLayer("depth_to_top must be non-negative".into()));
        }
        Ok(())
    }

    /// Signed offset of point (x, y) from the band centerline, measured in the
    /// band's rotated frame. |offset| <= thickness/2 means inside the band.
    pub fn band_offset(&self, domain: &DomainSpec, x: f64, y: f64) -> f64 {
        let theta = self.dip_deg.to_radians();
        let cx = 0.5 * domain.width;
        let cy = 0.5 * domain.depth;
        // Centerline height at zero dip.
        let yc0 = domain.depth - self.depth_to_top - 0.5 * self.thickness;
        -theta.sin() * (x - cx) + theta.cos() * (y - cy) + cy - yc0
    }

    /// True when point (x, y) lies inside the rotated band.
    pub fn contains(&self, domain: &DomainSpec, x: f64, y: f64) -> bool {
        self.band_offset(domain, x, y).abs() <= 0.5 * self.thickness
    }
}

/// Per-class material parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Material {
    /// Young's modulus in Pa.
    pub youngs_modulus: f64,
    /// Poisson's ratio.
    pub poisson_ratio: f64,
    /// Intrinsic permeability in m^2.
    pub permeability: f64,
    /// Pore fluid dynamic viscosity in Pa*s.
    pub fluid_viscosity: f64,
}

impl Material {
    fn validate(&self, name: &str) -> Result<(), GeomError> {
        if !(self.youngs_modulus > 0.0) {
            return Err(GeomError::InvalidMaterial(format!("{name}: E must be positive")));
        }
        if !(self.poisson_ratio > 0.0 && self.poisson_ratio < 0.5) {
            return Err(GeomError::InvalidMaterial(format!("{name}: nu must be in (0, 0.5)")));
        }
        if !(self.permeability > 0.0) {
            return Err(GeomError::InvalidMaterial(format!("{name}: permeability must be positive")));
        }
        if !(self.fluid_viscosity > 0.0) {
            return Err(GeomError::InvalidMaterial(format!("{name}: viscosity must be positive")));
        }
        Ok(())
    }
}

/// Materials indexed by class id. Class 0 is rock, class 1 is shale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MaterialRegistry {
    materials: Vec<Material>,
}

impl Default for MaterialRegistry {
    /// Stiff permeable rock and soft near-impermeable shale. The contrasts
    /// matter more than the absolute values; all are configurable.
    fn default() -> Self {
        Self {
            materials: vec![
                Material {
                    youngs_modulus: 10e9,
                    poisson_ratio: 0.25,
                    permeability: 1e-13,
                    fluid_viscosity: 1e-3,
                },
                Material {
                    youngs_modulus: 2e9,
                    poisson_ratio: 0.3,
                    permeability: 1e-18,
                    fluid_viscosity: 1e-3,
                },
            ],
        }
    }
}

impl MaterialRegistry {
    pub fn new(materials: Vec<Material>) -> Result<Self, GeomError> {
        let reg = Self { materials };
        reg.validate()?;
        Ok(reg)
    }

    /// Single-material registry (uniform rock); used for benchmark columns.
    pub fn uniform(material: Material) -> Result<Self, GeomError> {
        material.validate("class 0")?;
        Ok(Self { materials: vec![material] })
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if self.materials.is_empty() {
            return Err(GeomError::InvalidMaterial("registry is empty".into()));
        }
        for (idx, m) in self.materials.iter().enumerate() {
            m.validate(&format!("class {idx}"))?;
        }
        if self.materials.len() >= 2 {
            let rock = &self.materials[ROCK as usize];
            let shale = &self.materials[SHALE as usize];
            if shale.permeability >= rock.permeability {
                return Err(GeomError::InvalidMaterial(
                    "shale permeability must be below rock permeability".into(),
                ));
            }
            if shale.youngs_modulus >= rock.youngs_modulus {
                return Err(GeomError::InvalidMaterial(
                    "shale stiffness must be below rock stiffness".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn get(&self, class: u8) -> Option<&Material> {
        self.materials.get(class as usize)
    }

    pub fn len(&self) -> usize {
        self.materials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.materials.is_empty()
    }
}

/// Rasterized material assignment for one geometry.
///
/// `classes` is raster_h x raster_w row-major with row 0 at the ground
/// surface. `element_classes` is ny x nx row-major with element row 0 at the
/// bottom of the domain, matching the FEM element ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialField {
    pub raster_w: usize,
    pub raster_h: usize,
    pub classes: Vec<u8>,
    pub mesh_nx: usize,
    pub mesh_ny: usize,
    pub element_classes: Vec<u8>,
}

impl MaterialField {
    pub fn class_at(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.raster_w + col]
    }

    pub fn shale_pixels(&self) -> usize {
        self.classes.iter().filter(|&&c| c == SHALE).count()
    }
}

/// Draws `n` dip angles i.i.d. uniform on [0, 45] degrees.
pub fn sample_dip_angles(n: usize, seed: u64) -> Result<Vec<f64>, GeomError> {
    if n == 0 {
        return Err(GeomError::EmptyRequest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rng.random_range(0.0..=45.0)).collect())
}

/// Classifies raster pixels (at pixel centers) and FEM elements (at element
/// centroids) against the rotated band.
pub fn rasterize(
    domain: &DomainSpec,
    layer: &LayerSpec,
    mesh_nx: usize,
    mesh_ny: usize,
) -> Result<MaterialField, GeomError> {
    domain.validate()?;
    layer.validate()?;
    check_band_intersects(domain, layer)?;

    let mut classes = vec![ROCK; domain.raster_w * domain.raster_h];
    for row in 0..domain.raster_h {
        // Raster row 0 is the surface.
        let y = domain.depth * (1.0 - (row as f64 + 0.5) / domain.raster_h as f64);
        for col in 0..domain.raster_w {
            let x = domain.width * (col as f64 + 0.5) / domain.raster_w as f64;
            if layer.contains(domain, x, y) {
                classes[row * domain.raster_w + col] = SHALE;
            }
        }
    }

    let mut element_classes = vec![ROCK; mesh_nx * mesh_ny];
    let dx = domain.width / mesh_nx as f64;
    let dy = domain.depth / mesh_ny as f64;
    for j in 0..mesh_ny {
        let y = (j as f64 + 0.5) * dy;
        for i in 0..mesh_nx {
            let x = (i as f64 + 0.5) * dx;
            if layer.contains(domain, x, y) {
                element_classes[j * mesh_nx + i] = SHALE;
            }
        }
    }

    Ok(MaterialField {
        raster_w: domain.raster_w,
        raster_h: domain.raster_h,
        classes,
        mesh_nx,
        mesh_ny,
        element_classes,
    })
}

/// The slab is convex, so checking the four domain corners decides whether it
/// misses or swallows the rectangle.
fn check_band_intersects(domain: &DomainSpec, layer: &LayerSpec) -> Result<(), GeomError> {
    let half = 0.5 * layer.thickness;
    let corners = [
        (0.0, 0.0),
        (domain.width, 0.0),
        (domain.width, domain.depth),
        (0.0, domain.depth),
    ];
    let offsets: Vec<f64> = corners
        .iter()
        .map(|&(x, y)| layer.band_offset(domain, x, y))
        .collect();
    if offsets.iter().all(|&s| s > half) || offsets.iter().all(|&s| s < -half) {
        return Err(GeomError::BandOutsideDomain { dip_deg: layer.dip_deg });
    }
    if offsets.iter().all(|&s| s.abs() <= half) {
        return Err(GeomError::BandCoversDomain { dip_deg: layer.dip_deg });
    }
    Ok(())
}

/// Encodes a material field as a 3-channel image in CHW layout: shale pixels
/// get (1, 0, 0), rock pixels (0, 1, 0), and the third channel stays zero.
pub fn to_input_image(field: &MaterialField) -> Vec<f32> {
    let hw = field.raster_h * field.raster_w;
    let mut img = vec![0.0f32; 3 * hw];
    for (idx, &class) in field.classes.iter().enumerate() {
        let channel = match class {
            SHALE => 0,
            _ => 1,
        };
        img[channel * hw + idx] = 1.0;
    }
    img
}

/// Recovers the class grid from a 3-channel image by channel argmax.
pub fn classes_from_image(img: &[f32], raster_h: usize, raster_w: usize) -> Vec<u8> {
    let hw = raster_h * raster_w;
    assert_eq!(img.len(), 3 * hw, "image length does not match raster");
    (0..hw)
        .map(|idx| {
            let mut best = 0usize;
            for c in 1..3 {
                if img[c * hw + idx] > img[best * hw + idx] {
                    best = c;
                }
            }
            if best == 0 {
                SHALE
            } else {
                ROCK
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dip_angles_in_range_and_deterministic() {
        let a = sample_dip_angles(10_000, 42).unwrap();
        assert_eq!(a.len(), 10_000);
        assert!(a.iter().all(|&d| (0.0..=45.0).contains(&d)));
        let b = sample_dip_angles(10_000, 42).unwrap();
        assert_eq!(a, b);
        let single = sample_dip_angles(1, 7).unwrap();
        assert_eq!(single, sample_dip_angles(1, 7).unwrap());
    }

    #[test]
    fn dip_angles_empty_request_is_error() {
        assert!(matches!(sample_dip_angles(0, 1), Err(GeomError::EmptyRequest)));
    }

    #[test]
    fn dip_angles_mean_follows_uniform_law() {
        // Law-of-large-numbers check on the generator itself.
        let a = sample_dip_angles(100_000, 123).unwrap();
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        assert!((mean - 22.5).abs() < 0.5, "mean {mean} too far from 22.5");
    }

    #[test]
    fn zero_dip_is_full_width_horizontal_band() {
        let domain = DomainSpec::default();
        let layer = LayerSpec::with_dip(0.0);
        let field = rasterize(&domain, &layer, 48, 24).unwrap();
        // Every row is uniformly one class, and shale rows are contiguous.
        let mut shale_rows = Vec::new();
        for row in 0..domain.raster_h {
            let first = field.class_at(row, 0);
            for col in 0..domain.raster_w {
                assert_eq!(field.class_at(row, col), first, "row {row} not uniform");
            }
            if first == SHALE {
                shale_rows.push(row);
            }
        }
        assert!(!shale_rows.is_empty());
        let span = shale_rows.last().unwrap() - shale_rows.first().unwrap() + 1;
        assert_eq!(span, shale_rows.len(), "shale rows not contiguous");
    }

    #[test]
    fn zero_dip_mirror_symmetry() {
        let domain = DomainSpec::default();
        let layer = LayerSpec::with_dip(0.0);
        let field = rasterize(&domain, &layer, 48, 24).unwrap();
        for row in 0..domain.raster_h {
            for col in 0..domain.raster_w {
                assert_eq!(
                    field.class_at(row, col),
                    field.class_at(row, domain.raster_w - 1 - col)
                );
            }
        }
    }

    #[test]
    fn shale_area_matches_monte_carlo_oracle() {
        let domain = DomainSpec::default();
        let layer = LayerSpec::with_dip(30.0);
        let field = rasterize(&domain, &layer, 48, 24).unwrap();
        let pixel_area = (domain.width / domain.raster_w as f64)
            * (domain.depth / domain.raster_h as f64);
        let raster_area = field.shale_pixels() as f64 * pixel_area;

        // Independent Monte Carlo point-in-band estimate of the band area.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000usize;
        let mut hits = 0usize;
        for _ in 0..n {
            let x = rng.random_range(0.0..domain.width);
            let y = rng.random_range(0.0..domain.depth);
            if layer.contains(&domain, x, y) {
                hits += 1;
            }
        }
        let mc_area = hits as f64 / n as f64 * domain.width * domain.depth;
        let rel = (raster_area - mc_area).abs() / mc_area;
        assert!(rel < 0.02, "raster {raster_area} vs MC {mc_area}, rel {rel}");
    }

    #[test]
    fn band_outside_domain_is_geometry_error() {
        let domain = DomainSpec::default();
        let layer = LayerSpec { dip_deg: 0.0, thickness: 4.0, depth_to_top: 200.0 };
        assert!(matches!(
            rasterize(&domain, &layer, 8, 8),
            Err(GeomError::BandOutsideDomain { .. })
        ));
    }

    #[test]
    fn band_covering_domain_is_geometry_error() {
        let domain = DomainSpec::default();
        let layer = LayerSpec { dip_deg: 0.0, thickness: 500.0, depth_to_top: 0.0 };
        // depth_to_top 0 with a huge thickness swallows the box entirely.
        let layer = LayerSpec { depth_to_top: -0.0, ..layer };
        assert!(matches!(
            rasterize(&domain, &layer, 8, 8),
            Err(GeomError::BandCoversDomain { .. })
        ));
    }

    #[test]
    fn both_classes_present_across_dip_range() {
        let domain = DomainSpec::default();
        for k in 0..=45 {
            let layer = LayerSpec::with_dip(k as f64);
            let field = rasterize(&domain, &layer, 48, 24).unwrap();
            let shale = field.shale_pixels();
            assert!(shale > 0 && shale < field.classes.len(), "dip {k}");
            let elem_shale = field.element_classes.iter().filter(|&&c| c == SHALE).count();
            assert!(elem_shale > 0 && elem_shale < field.element_classes.len(), "dip {k}");
        }
    }

    #[test]
    fn element_classes_match_pixels_at_same_resolution() {
        let domain = DomainSpec::default();
        let layer = LayerSpec::with_dip(17.3);
        let field = rasterize(&domain, &layer, domain.raster_w, domain.raster_h).unwrap();
        for row in 0..domain.raster_h {
            for col in 0..domain.raster_w {
                // Element row 0 is at the bottom; raster row 0 at the surface.
                let j = domain.raster_h - 1 - row;
                assert_eq!(
                    field.class_at(row, col),
                    field.element_classes[j * domain.raster_w + col]
                );
            }
        }
    }

    #[test]
    fn input_image_encoding_and_argmax_roundtrip() {
        let domain = DomainSpec::default();
        let layer = LayerSpec::with_dip(45.0);
        let field = rasterize(&domain, &layer, 48, 24).unwrap();
        let img = to_input_image(&field);
        let hw = field.raster_h * field.raster_w;
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Channel sums equal per-class pixel counts.
        let shale = field.shale_pixels() as f32;
        let rock = hw as f32 - shale;
        let sum0: f32 = img[..hw].iter().sum();
        let sum1: f32 = img[hw..2 * hw].iter().sum();
        let sum2: f32 = img[2 * hw..].iter().sum();
        assert_eq!(sum0, shale);
        assert_eq!(sum1, rock);
        assert_eq!(sum2, 0.0);
        assert_eq!(classes_from_image(&img, field.raster_h, field.raster_w), field.classes);
    }

    #[test]
    fn all_rock_field_encodes_to_pure_second_channel() {
        let field = MaterialField {
            raster_w: 4,
            raster_h: 2,
            classes: vec![ROCK; 8],
            mesh_nx: 4,
            mesh_ny: 2,
            element_classes: vec![ROCK; 8],
        };
        let img = to_input_image(&field);
        assert!(img[..8].iter().all(|&v| v == 0.0));
        assert!(img[8..16].iter().all(|&v| v == 1.0));
        assert!(img[16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_registry_honors_contrasts() {
        let reg = MaterialRegistry::default();
        reg.validate().unwrap();
        assert!(reg.get(SHALE).unwrap().permeability < reg.get(ROCK).unwrap().permeability);
        assert!(reg.get(SHALE).unwrap().youngs_modulus < reg.get(ROCK).unwrap().youngs_modulus);
        assert!(reg.get(2).is_none());
    }

    #[test]
    fn registry_rejects_inverted_contrast() {
        let mut mats = MaterialRegistry::default().materials.clone();
        mats[SHALE as usize].permeability = 1e-10;
        assert!(MaterialRegistry::new(mats).is_err());
    }

    proptest! {
        #[test]
        fn shale_count_is_continuous_in_dip(dip in 0.0f64..44.9) {
            let domain = DomainSpec::default();
            let a = rasterize(&domain, &LayerSpec::with_dip(dip), 16, 16).unwrap();
            let b = rasterize(&domain, &LayerSpec::with_dip(dip + 0.1), 16, 16).unwrap();
            let total = a.classes.len() as f64;
            let diff = (a.shale_pixels() as f64 - b.shale_pixels() as f64).abs();
            prop_assert!(diff < 0.03 * total, "diff {} at dip {}", diff, dip);
        }

        #[test]
        fn image_argmax_recovers_classes(dip in 0.0f64..=45.0) {
            let domain = DomainSpec::default();
            let field = rasterize(&domain, &LayerSpec::with_dip(dip), 16, 16).unwrap();
            let img = to_input_image(&field);
            prop_assert_eq!(classes_from_image(&img, field.raster_h, field.raster_w), field.classes);
        }
    }
}
