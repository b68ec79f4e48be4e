use serde::{Deserialize, Serialize};

use super::contour::{signed_area, Point, TumorAnnotation};
use super::HeatmapError;

const TUMOR_COLOR: [u8; 3] = [200, 0, 0];

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename = "FeatureCollection")]
struct FeatureCollection {
    features: Vec<Feature>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename = "Feature")]
struct Feature {
    geometry: Geometry,
    properties: Properties,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename = "Polygon")]
struct Geometry {
    coordinates: Vec<Vec<Point>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Properties {
    object_type: String,
    classification: Classification,
    measurements: Measurements,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<Metadata>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Classification {
    name: String,
    color: [u8; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct Measurements {
    mean_probability: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    slide_id: String,
}

fn check_ring(ring: &[Point]) -> Result<(), HeatmapError> {
    if ring.len() < 4 {
        return Err(HeatmapError::InvalidRing(format!("ring has {} points, need 4", ring.len())));
    }
    if ring.first() != ring.last() {
        return Err(HeatmapError::InvalidRing("ring is not closed".into()));
    }
    if ring.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(HeatmapError::InvalidRing("coordinates must be finite and >= 0".into()));
    }
    Ok(())
}

/// QuPath-style FeatureCollection, one Polygon per annotation, coordinates
/// in level-0 pixels.
pub fn to_geojson(annotations: &[TumorAnnotation], slide_id: &str) -> Result<String, HeatmapError> {
    let features = annotations
        .iter()
        .map(|a| {
            check_ring(&a.outer_ring)?;
            a.holes.iter().try_for_each(|h| check_ring(h))?;
            Ok(Feature {
                geometry: Geometry {
                    coordinates: std::iter::once(&a.outer_ring)
                        .chain(&a.holes)
                        .cloned()
                        .collect(),
                },
                properties: Properties {
                    object_type: "annotation".into(),
                    classification: Classification {
                        name: "Tumor".into(),
                        color: TUMOR_COLOR,
                    },
                    measurements: Measurements {
                        mean_probability: a.mean_probability,
                    },
                    metadata: (!slide_id.is_empty()).then(|| Metadata {
                        slide_id: slide_id.to_string(),
                    }),
                },
            })
        })
        .collect::<Result<Vec<_>, HeatmapError>>()?;
    Ok(serde_json::to_string(&FeatureCollection { features })?)
}

/// Inverse of [`to_geojson`]; areas are recomputed from the rings.
pub fn from_geojson(text: &str) -> Result<Vec<TumorAnnotation>, HeatmapError> {
    let fc: FeatureCollection = serde_json::from_str(text)?;
    fc.features
        .into_iter()
        .map(|f| {
            let mut rings = f.geometry.coordinates.into_iter();
            let outer_ring = rings
                .next()
                .ok_or_else(|| HeatmapError::InvalidRing("polygon without rings".into()))?;
            let holes: Vec<_> = rings.collect();
            check_ring(&outer_ring)?;
            holes.iter().try_for_each(|h| check_ring(h))?;
            let area_px = signed_area(&outer_ring) + holes.iter().map(|h| signed_area(h)).sum::<f64>();
            Ok(TumorAnnotation {
                outer_ring,
                holes,
                mean_probability: f.properties.measurements.mean_probability,
                area_px,
            })
        })
        .collect()
}
