//! Maintenance office registry and nearest-office lookup.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GeoPoint;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance in kilometers on a sphere of radius 6371 km.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat_deg().to_radians(), b.lat_deg().to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon_deg() - a.lon_deg()).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OfficeEntry", into = "OfficeEntry")]
pub struct MaintenanceOffice {
    pub office_id: String,
    pub name: String,
    pub location: GeoPoint,
    pub webhook_url: String,
}

/// Flat registry-file form of an office.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct OfficeEntry {
    office_id: String,
    name: String,
    lat_deg: f64,
    lon_deg: f64,
    webhook_url: String,
}

impl TryFrom<OfficeEntry> for MaintenanceOffice {
    type Error = crate::model::ModelError;

    fn try_from(e: OfficeEntry) -> Result<Self, Self::Error> {
        Ok(MaintenanceOffice {
            location: GeoPoint::new(e.lat_deg, e.lon_deg)?,
            office_id: e.office_id,
            name: e.name,
            webhook_url: e.webhook_url,
        })
    }
}

impl From<MaintenanceOffice> for OfficeEntry {
    fn from(o: MaintenanceOffice) -> Self {
        OfficeEntry {
            lat_deg: o.location.lat_deg(),
            lon_deg: o.location.lon_deg(),
            office_id: o.office_id,
            name: o.name,
            webhook_url: o.webhook_url,
        }
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("office registry is empty")]
    Empty,
    #[error("duplicate office_id {0:?}")]
    DuplicateId(String),
    #[error("office {0:?} has an empty webhook_url")]
    MissingWebhook(String),
    #[error("malformed registry: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Non-empty set of offices with unique ids.
#[derive(Debug, Clone)]
pub struct OfficeRegistry {
    offices: Vec<MaintenanceOffice>,
}

impl OfficeRegistry {
    pub fn new(offices: Vec<MaintenanceOffice>) -> Result<Self, RegistryError> {
        if offices.is_empty() {
            return Err(RegistryError::Empty);
        }
        let mut seen = HashSet::new();
        for o in &offices {
            if !seen.insert(o.office_id.as_str()) {
                return Err(RegistryError::DuplicateId(o.office_id.clone()));
            }
            if o.webhook_url.trim().is_empty() {
                return Err(RegistryError::MissingWebhook(o.office_id.clone()));
            }
        }
        Ok(Self { offices })
    }

    pub fn from_json(text: &str) -> Result<Self, RegistryError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn offices(&self) -> &[MaintenanceOffice] {
        &self.offices
    }

    pub fn get(&self, office_id: &str) -> Option<&MaintenanceOffice> {
        self.offices.iter().find(|o| o.office_id == office_id)
    }

    /// The office closest to `p`; equal distances go to the smallest id.
    pub fn nearest(&self, p: GeoPoint) -> &MaintenanceOffice {
        nearest_office(p, &self.offices).expect("registry is never empty")
    }
}

pub fn nearest_office(p: GeoPoint, offices: &[MaintenanceOffice]) -> Option<&MaintenanceOffice> {
    offices
        .iter()
        .map(|o| (haversine_km(p, o.location), o))
        .min_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.office_id.cmp(&b.office_id)))
        .map(|(_, o)| o)
}
