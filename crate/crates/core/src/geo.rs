//! Road-network ingestion from OSM XML and equidistant point sampling.
//!
//! Sampling is done independently per way: every way yields points at arc
//! length offsets `0, s, 2s, ...` strictly below its total length. Points
//! where ways meet are not deduplicated.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used for all great-circle distances.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Way {
    pub id: i64,
    pub nodes: Vec<i64>,
    pub highway: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoadNetwork {
    pub nodes: BTreeMap<i64, LatLon>,
    pub ways: Vec<Way>,
}

impl RoadNetwork {
    /// Checks the structural invariants: coordinates in range, every way has
    /// at least two nodes and only references known nodes.
    pub fn validate(&self) -> Result<()> {
        for (id, p) in &self.nodes {
            if !p.is_valid() {
                return Err(Error::validation(format!(
                    "node {id} has out-of-range coordinates ({}, {})",
                    p.lat, p.lon
                )));
            }
        }
        for way in &self.ways {
            if way.nodes.len() < 2 {
                return Err(Error::validation(format!(
                    "way {} has {} node(s), need at least 2",
                    way.id,
                    way.nodes.len()
                )));
            }
            if let Some(missing) = way.nodes.iter().find(|n| !self.nodes.contains_key(n)) {
                return Err(Error::validation(format!(
                    "way {} references unknown node {missing}",
                    way.id
                )));
            }
        }
        Ok(())
    }

    /// Coordinates of a way's nodes in order. Assumes a validated network.
    pub fn polyline(&self, way: &Way) -> Vec<LatLon> {
        way.nodes.iter().map(|n| self.nodes[n]).collect()
    }
}

/// Which `highway=*` values to keep. `None` keeps every value.
#[derive(Debug, Clone, Default)]
pub struct HighwayFilter(pub Option<BTreeSet<String>>);

impl HighwayFilter {
    pub fn only<I, S>(values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(Some(values.into_iter().map(Into::into).collect()))
    }

    fn keeps(&self, value: &str) -> bool {
        self.0.as_ref().is_none_or(|set| set.contains(value))
    }
}

/// Parses the node/way/tag subset of OSM XML, keeping only highway ways.
pub fn parse_osm_xml(doc: &str, filter: &HighwayFilter) -> Result<RoadNetwork> {
    let xml = roxmltree::Document::parse(doc).map_err(|e| Error::Parse {
        line: e.pos().row,
        message: e.to_string(),
    })?;
    let line_of = |n: roxmltree::Node| xml.text_pos_at(n.range().start).row;

    let mut net = RoadNetwork::default();
    for node in xml.root_element().children().filter(|n| n.is_element()) {
        match node.tag_name().name() {
            "node" => {
                let id = attr::<i64>(node, "id", line_of(node))?;
                let lat = attr::<f64>(node, "lat", line_of(node))?;
                let lon = attr::<f64>(node, "lon", line_of(node))?;
                net.nodes.insert(id, LatLon { lat, lon });
            }
            "way" => {
                let id = attr::<i64>(node, "id", line_of(node))?;
                let mut refs = Vec::new();
                let mut highway = None;
                for child in node.children().filter(|n| n.is_element()) {
                    match child.tag_name().name() {
                        "nd" => refs.push(attr::<i64>(child, "ref", line_of(child))?),
                        "tag" if child.attribute("k") == Some("highway") => {
                            highway = child.attribute("v").map(str::to_owned);
                        }
                        _ => {}
                    }
                }
                if let Some(highway) = highway.filter(|h| filter.keeps(h)) {
                    net.ways.push(Way {
                        id,
                        nodes: refs,
                        highway,
                    });
                }
            }
            _ => {}
        }
    }
    net.validate()?;
    Ok(net)
}

fn attr<T: std::str::FromStr>(node: roxmltree::Node, name: &str, line: u32) -> Result<T> {
    let raw = node.attribute(name).ok_or_else(|| Error::Parse {
        line,
        message: format!("<{}> missing attribute `{name}`", node.tag_name().name()),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("<{}> attribute `{name}` has invalid value {raw:?}", node.tag_name().name()),
    })
}

/// Great-circle distance in meters (haversine, R = 6,371 km).
pub fn haversine_m(a: LatLon, b: LatLon) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub point_id: String,
    pub lat: f64,
    pub lon: f64,
    pub way_id: i64,
    pub offset_m: f64,
}

pub fn point_id(way_id: i64, index: usize) -> String {
    format!("{way_id}-{index:05}")
}

/// Total great-circle length of a polyline.
pub fn polyline_length_m(line: &[LatLon]) -> f64 {
    line.windows(2).map(|w| haversine_m(w[0], w[1])).sum()
}

/// Points at offsets `k * spacing_m` (k = 0, 1, ...) strictly below the
/// polyline's length, each linearly interpolated in lat/lon within the
/// segment that contains it.
pub fn sample_polyline(line: &[LatLon], spacing_m: f64) -> Vec<(f64, LatLon)> {
    let seg_len: Vec<f64> = line.windows(2).map(|w| haversine_m(w[0], w[1])).collect();
    let total: f64 = seg_len.iter().sum();
    let mut out = Vec::new();
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 0.. {
        let offset = k as f64 * spacing_m;
        if offset >= total {
            break;
        }
        // Advance to the segment containing `offset`; zero-length segments
        // are skipped naturally.
        while seg + 1 < seg_len.len() && seg_start + seg_len[seg] <= offset {
            seg_start += seg_len[seg];
            seg += 1;
        }
        let t = if seg_len[seg] > 0.0 {
            ((offset - seg_start) / seg_len[seg]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (a, b) = (line[seg], line[seg + 1]);
        out.push((
            offset,
            LatLon {
                lat: a.lat + t * (b.lat - a.lat),
                lon: a.lon + t * (b.lon - a.lon),
            },
        ));
    }
    out
}

/// Samples every way of the network, ordered by way id then offset.
pub fn sample_points(net: &RoadNetwork, spacing_m: f64) -> Result<Vec<SamplePoint>> {
    if !(spacing_m > 0.0 && spacing_m.is_finite()) {
        return Err(Error::validation(format!(
            "spacing must be positive, got {spacing_m}"
        )));
    }
    let mut ways: Vec<&Way> = net.ways.iter().collect();
    ways.sort_by_key(|w| w.id);
    let mut out = Vec::new();
    for way in ways {
        let line = net.polyline(way);
        for (k, (offset, p)) in sample_polyline(&line, spacing_m).into_iter().enumerate() {
            out.push(SamplePoint {
                point_id: point_id(way.id, k),
                lat: p.lat,
                lon: p.lon,
                way_id: way.id,
                offset_m: offset,
            });
        }
    }
    Ok(out)
}

pub fn write_points_jsonl<W: Write>(points: &[SamplePoint], mut out: W) -> Result<()> {
    for p in points {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n").map_err(|e| Error::io("<points output>", e))?;
    }
    Ok(())
}

pub fn read_points_jsonl<R: BufRead>(input: R) -> Result<Vec<SamplePoint>> {
    let mut points = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<points input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i as u32 + 1,
            message: e.to_string(),
        })?;
        points.push(p);
    }
    Ok(points)
}
