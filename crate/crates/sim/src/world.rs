//! The simulated world: where every device is, who is advertising, and
//! which links are up.

use std::collections::BTreeMap;

use awarenet_core::broker::Broker;
use awarenet_core::model::{DeviceId, GeoPoint, Timestamp};
use awarenet_core::presence::ScanResult;
use awarenet_core::sync::LinkError;
use awarenet_core::triggers::geo_distance;
use awarenet_core::wire::{Exchange, InProcess};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Metres per degree of latitude on the reference sphere.
const M_PER_DEG: f64 = 111_194.93;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("device {0} already exists")]
    DuplicateDevice(DeviceId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDevice {
    pub position: GeoPoint,
    pub advertising: bool,
    /// Mirrors the device's own invisible setting.
    pub invisible: bool,
    pub name: Option<String>,
    pub link: Link,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub devices: BTreeMap<DeviceId, SimDevice>,
    /// Stationary advertisers that never scan.
    pub beacons: BTreeMap<DeviceId, GeoPoint>,
    pub clock: Timestamp,
    pub radio_range_m: f64,
}

impl World {
    pub fn new(radio_range_m: f64, start: Timestamp) -> Self {
        Self { devices: BTreeMap::new(), beacons: BTreeMap::new(), clock: start, radio_range_m }
    }

    pub fn add_device(&mut self, id: DeviceId, device: SimDevice) -> Result<(), WorldError> {
        if self.devices.contains_key(&id) || self.beacons.contains_key(&id) {
            return Err(WorldError::DuplicateDevice(id));
        }
        self.devices.insert(id, device);
        Ok(())
    }

    pub fn add_beacon(&mut self, id: DeviceId, at: GeoPoint) -> Result<(), WorldError> {
        if self.devices.contains_key(&id) || self.beacons.contains_key(&id) {
            return Err(WorldError::DuplicateDevice(id));
        }
        self.beacons.insert(id, at);
        Ok(())
    }

    pub fn device(&self, id: DeviceId) -> Result<&SimDevice, WorldError> {
        self.devices.get(&id).ok_or(WorldError::UnknownDevice(id))
    }

    pub fn device_mut(&mut self, id: DeviceId) -> Result<&mut SimDevice, WorldError> {
        self.devices.get_mut(&id).ok_or(WorldError::UnknownDevice(id))
    }

    /// Moves the clock forward. Nothing else changes with it.
    pub fn advance_to(&mut self, t: Timestamp) {
        self.clock = self.clock.max(t);
    }
}

/// What `observer` would see scanning right now.
pub fn radio_scan(world: &World, observer: DeviceId) -> Result<ScanResult, WorldError> {
    let me = world.device(observer)?;
    let mut scan = ScanResult::new(world.clock);
    for (&id, d) in &world.devices {
        if id != observer
            && d.advertising
            && !d.invisible
            && geo_distance(me.position, d.position) <= world.radio_range_m
        {
            scan.visible.insert(id, d.name.clone());
        }
    }
    for (&id, &at) in &world.beacons {
        if geo_distance(me.position, at) <= world.radio_range_m {
            scan.visible.insert(id, None);
        }
    }
    Ok(scan)
}

/// A position fix with zero-mean uniform error of at most `bound_m` metres
/// per axis. No randomness is drawn when the bound is zero.
pub fn gps_fix(true_pos: GeoPoint, bound_m: f64, rng: &mut ChaCha8Rng) -> GeoPoint {
    if bound_m <= 0.0 {
        return true_pos;
    }
    let north = rng.gen_range(-bound_m..=bound_m);
    let east = rng.gen_range(-bound_m..=bound_m);
    let cos_lat = true_pos.lat().to_radians().cos().max(1e-9);
    true_pos.offset(north / M_PER_DEG, east / (M_PER_DEG * cos_lat))
}

/// A point `north_m` and `east_m` metres away from `from`.
pub fn displaced(from: GeoPoint, north_m: f64, east_m: f64) -> GeoPoint {
    let cos_lat = from.lat().to_radians().cos().max(1e-9);
    from.offset(north_m / M_PER_DEG, east_m / (M_PER_DEG * cos_lat))
}

/// A device's link to the broker. Frames still go through the full wire
/// encoding; a down link fails before anything reaches the broker.
pub struct SimLink<'a> {
    pub broker: &'a mut Broker,
    pub link: Link,
    pub now: Timestamp,
}

impl Exchange for SimLink<'_> {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, LinkError> {
        if self.link == Link::Down {
            return Err(LinkError::Down);
        }
        InProcess { broker: self.broker, now: self.now }.exchange(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn dev(n: u8) -> DeviceId {
        DeviceId::from_bytes([0x02, 0, 0, 0, 0, n])
    }

    fn origin() -> GeoPoint {
        GeoPoint::new(38.738522, -9.1543572).unwrap()
    }

    fn phone(at: GeoPoint) -> SimDevice {
        SimDevice { position: at, advertising: true, invisible: false, name: None, link: Link::Up }
    }

    #[test]
    fn nearby_devices_see_each_other() {
        let mut w = World::new(10.0, 0);
        w.add_device(dev(1), phone(origin())).unwrap();
        w.add_device(dev(2), phone(displaced(origin(), 5.0, 0.0))).unwrap();
        assert!(radio_scan(&w, dev(1)).unwrap().visible.contains_key(&dev(2)));
        assert!(radio_scan(&w, dev(2)).unwrap().visible.contains_key(&dev(1)));
        assert!(!radio_scan(&w, dev(1)).unwrap().visible.contains_key(&dev(1)));
    }

    #[test]
    fn out_of_range_and_invisible_are_hidden() {
        let mut w = World::new(10.0, 0);
        w.add_device(dev(1), phone(origin())).unwrap();
        w.add_device(dev(2), phone(displaced(origin(), 50.0, 0.0))).unwrap();
        w.add_device(dev(3), phone(displaced(origin(), 0.0, 3.0))).unwrap();
        w.device_mut(dev(3)).unwrap().invisible = true;
        assert!(radio_scan(&w, dev(1)).unwrap().visible.is_empty());
        // the invisible device still scans
        assert!(radio_scan(&w, dev(3)).unwrap().visible.contains_key(&dev(1)));
    }

    #[test]
    fn beacons_advertise() {
        let mut w = World::new(10.0, 0);
        w.add_device(dev(1), phone(origin())).unwrap();
        w.add_beacon(dev(9), displaced(origin(), 2.0, 2.0)).unwrap();
        assert_eq!(radio_scan(&w, dev(1)).unwrap().visible.get(&dev(9)), Some(&None));
        assert_eq!(w.add_beacon(dev(1), origin()), Err(WorldError::DuplicateDevice(dev(1))));
    }

    #[test]
    fn unknown_observer() {
        let w = World::new(10.0, 0);
        assert_eq!(radio_scan(&w, dev(1)), Err(WorldError::UnknownDevice(dev(1))));
    }

    #[test]
    fn clock_never_moves_devices() {
        let mut w = World::new(10.0, 0);
        w.add_device(dev(1), phone(origin())).unwrap();
        w.advance_to(1_000_000);
        w.advance_to(5);
        assert_eq!(w.clock, 1_000_000);
        assert_eq!(w.device(dev(1)).unwrap().position, origin());
    }

    #[test]
    fn displacement_matches_distance() {
        let p = displaced(origin(), 30.0, 40.0);
        assert!((geo_distance(origin(), p) - 50.0).abs() < 0.01);
    }

    #[test]
    fn jitter_is_bounded_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = gps_fix(origin(), 20.0, &mut a);
            assert_eq!(p, gps_fix(origin(), 20.0, &mut b));
            assert!(geo_distance(origin(), p) <= 20.0 * 2f64.sqrt() + 1e-6);
        }
        assert_eq!(gps_fix(origin(), 0.0, &mut a), origin());
    }
}
