//! Event and station catalogs served from fixture documents, with region
//! queries by bounding box or by a named region from a static table.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GatewayError;
use crate::seismo::{EventRecord, StationMeta};

const EVENTS: &str = include_str!("../../fixtures/catalog/events.json");
const STATIONS: &str = include_str!("../../fixtures/catalog/stations.json");
const REGIONS: &str = include_str!("../../fixtures/catalog/regions.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Bbox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl Bbox {
    /// `minLat,maxLat,minLon,maxLon`
    pub fn parse(s: &str) -> Result<Bbox, GatewayError> {
        let parts = parse_numbers(s, 4, "bbox")?;
        let b = Bbox { min_lat: parts[0], max_lat: parts[1], min_lon: parts[2], max_lon: parts[3] };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Unprocessable(m));
        if !(-90.0..=90.0).contains(&self.min_lat) || !(-90.0..=90.0).contains(&self.max_lat) {
            return bad(format!("latitudes must lie in [-90, 90], got {} and {}", self.min_lat, self.max_lat));
        }
        if !(-180.0..=180.0).contains(&self.min_lon) || !(-180.0..=180.0).contains(&self.max_lon) {
            return bad(format!("longitudes must lie in [-180, 180], got {} and {}", self.min_lon, self.max_lon));
        }
        if self.min_lat > self.max_lat {
            return bad(format!("minLat {} exceeds maxLat {}", self.min_lat, self.max_lat));
        }
        if self.min_lon > self.max_lon {
            return bad("minLon exceeds maxLon; boxes across the antimeridian are not supported".into());
        }
        Ok(())
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.min_lat <= lat && lat <= self.max_lat && self.min_lon <= lon && lon <= self.max_lon
    }
}

fn parse_numbers(s: &str, n: usize, what: &str) -> Result<Vec<f64>, GatewayError> {
    let parts: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    match parts {
        Ok(v) if v.len() == n && v.iter().all(|x| x.is_finite()) => Ok(v),
        _ => Err(GatewayError::Unprocessable(format!("{what} must be {n} comma-separated numbers, got `{s}`"))),
    }
}

/// Closed interval `lo,hi`.
pub fn parse_range(s: &str, what: &str) -> Result<(f64, f64), GatewayError> {
    let v = parse_numbers(s, 2, what)?;
    if v[0] > v[1] {
        return Err(GatewayError::Unprocessable(format!("{what} lower bound exceeds upper bound")));
    }
    Ok((v[0], v[1]))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionQuery {
    pub bbox: Option<Bbox>,
    pub time_range: Option<(f64, f64)>,
    pub magnitude_range: Option<(f64, f64)>,
}

impl RegionQuery {
    pub fn matches_event(&self, e: &EventRecord) -> bool {
        self.bbox.is_none_or(|b| b.contains(e.latitude, e.longitude))
            && self.time_range.is_none_or(|(lo, hi)| lo <= e.origin_time && e.origin_time <= hi)
            && self.magnitude_range.is_none_or(|(lo, hi)| lo <= e.magnitude && e.magnitude <= hi)
    }
}

pub struct Catalog {
    events: Vec<EventRecord>,
    stations: Vec<StationMeta>,
    regions: BTreeMap<String, Bbox>,
}

impl Catalog {
    /// The fixtures compiled into the binary.
    pub fn builtin() -> Self {
        Self::parse(EVENTS, STATIONS, REGIONS).expect("builtin fixtures are valid")
    }

    /// Fixture files from a directory holding `events.json`, `stations.json`
    /// and `regions.json`; missing files fall back to the builtin ones.
    pub fn from_dir(dir: &Path) -> Result<Self, GatewayError> {
        let read = |name: &str, fallback: &str| -> Result<String, GatewayError> {
            let p = dir.join(name);
            if p.exists() {
                std::fs::read_to_string(&p).map_err(|e| GatewayError::Config(format!("{}: {e}", p.display())))
            } else {
                Ok(fallback.to_string())
            }
        };
        Self::parse(&read("events.json", EVENTS)?, &read("stations.json", STATIONS)?, &read("regions.json", REGIONS)?)
    }

    pub fn parse(events: &str, stations: &str, regions: &str) -> Result<Self, GatewayError> {
        let fixture = |what: &str, e: serde_json::Error| GatewayError::Config(format!("{what} fixture: {e}"));
        let events: Vec<EventRecord> = serde_json::from_str(events).map_err(|e| fixture("events", e))?;
        let stations: Vec<StationMeta> = serde_json::from_str(stations).map_err(|e| fixture("stations", e))?;
        let regions: BTreeMap<String, Bbox> = serde_json::from_str(regions).map_err(|e| fixture("regions", e))?;
        for e in &events {
            e.check().map_err(|err| GatewayError::Config(err.to_string()))?;
        }
        for s in &stations {
            s.check().map_err(|err| GatewayError::Config(err.to_string()))?;
        }
        for (name, b) in &regions {
            b.check().map_err(|err| GatewayError::Config(format!("region {name}: {err}")))?;
        }
        Ok(Catalog { events, stations, regions })
    }

    pub fn all_events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn all_stations(&self) -> &[StationMeta] {
        &self.stations
    }

    pub fn regions(&self) -> &BTreeMap<String, Bbox> {
        &self.regions
    }

    pub fn region(&self, name: &str) -> Result<Bbox, GatewayError> {
        let key = name.trim().to_lowercase();
        self.regions.get(&key).copied().ok_or_else(|| GatewayError::NotFound(format!("unknown region `{name}`")))
    }

    /// Matching events, newest first (event id breaks ties).
    pub fn events(&self, q: &RegionQuery) -> Vec<EventRecord> {
        let mut hits: Vec<EventRecord> = self.events.iter().filter(|e| q.matches_event(e)).cloned().collect();
        hits.sort_by(|a, b| b.origin_time.total_cmp(&a.origin_time).then_with(|| a.event_id.cmp(&b.event_id)));
        hits
    }

    pub fn stations(&self, bbox: Option<&Bbox>) -> Vec<StationMeta> {
        self.stations.iter().filter(|s| bbox.is_none_or(|b| b.contains(s.latitude, s.longitude))).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_parsing_rules() {
        assert!(Bbox::parse("40,45,10,20").is_ok());
        assert!(Bbox::parse("45,40,10,20").is_err());
        assert!(Bbox::parse("40,45,170,-170").is_err());
        assert!(Bbox::parse("40,45,10").is_err());
        assert!(Bbox::parse("40,95,10,20").is_err());
        assert!(Bbox::parse("a,b,c,d").is_err());
    }

    #[test]
    fn builtin_fixtures_load() {
        let c = Catalog::builtin();
        assert!(c.all_events().len() >= 2);
        let max = c.all_events().iter().map(|e| e.magnitude).fold(f64::MIN, f64::max);
        assert_eq!(max, 7.2);
        assert!(c.region("Central-Italy").is_ok());
    }
}
