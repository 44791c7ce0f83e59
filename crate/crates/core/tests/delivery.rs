use awarenet_core::broker::Broker;
use awarenet_core::device::{Device, DeviceConfig};
use awarenet_core::feedback::RecordingSink;
use awarenet_core::model::{DeviceId, GeoPoint, NoteBody, NotificationKind};
use awarenet_core::presence::ScanResult;
use awarenet_core::sync::{LinkError, PushEffect};
use awarenet_core::triggers::TriggerRef;
use awarenet_core::wire::{Exchange, InProcess, WireLink};

fn dev(n: u8) -> DeviceId {
    DeviceId::from_bytes([0x02, 0, 0, 0, 0, n])
}

const T0: i64 = 1_374_735_600_000;

struct Offline;

impl Exchange for Offline {
    fn exchange(&mut self, _: &[u8]) -> Result<Vec<u8>, LinkError> {
        Err(LinkError::Down)
    }
}

fn sync(d: &mut Device, broker: &mut Broker, now: i64) -> Vec<PushEffect> {
    d.sync(&mut WireLink(InProcess { broker, now }), now).unwrap().effects
}

#[test]
fn carrier_note_travels_and_fires_on_recipient_only() {
    let mut broker = Broker::new();
    let (mut john, mut alice) = (
        Device::in_memory(dev(1), DeviceConfig::default()).unwrap(),
        Device::in_memory(dev(3), DeviceConfig::default()).unwrap(),
    );
    let jules = john.associate("Jules", dev(2), None).unwrap().contact_id;
    let to_alice = john.associate("Alice", dev(3), None).unwrap().contact_id;
    alice.associate("John", dev(1), None).unwrap();

    let note = john.create_note(NoteBody::Text("Jules cooks tonight".into()), T0).unwrap().id;
    john.attach(note, TriggerRef::Person(jules)).unwrap();
    john.send(note, &[to_alice], Some(jules)).unwrap();

    assert!(john.sync(&mut WireLink(Offline), T0).is_err());
    assert!(john.is_pending(note));
    sync(&mut john, &mut broker, T0 + 1);
    assert!(!john.is_pending(note));

    assert_eq!(sync(&mut alice, &mut broker, T0 + 2), vec![PushEffect::NoteReceived(note)]);
    assert!(sync(&mut alice, &mut broker, T0 + 3).is_empty());
    assert_eq!(broker.total_pending(), 0);

    let pos = GeoPoint::new(38.7, -9.1).unwrap();
    let mut sink = RecordingSink::default();
    let seen = ScanResult::new(T0 + 60_000).with(dev(2), Some("Jules"));
    let fired = |out: &awarenet_core::device::ScanOutcome| {
        out.notifications.iter().any(|n| matches!(n.kind, NotificationKind::NoteFired { note: id, .. } if id == note))
    };
    assert!(fired(&alice.on_scan(&seen, pos, &mut sink).unwrap()));
    // the sender holds the note but does not evaluate it
    assert!(!fired(&john.on_scan(&seen, pos, &mut sink).unwrap()));
}

#[test]
fn block_reaches_the_blocked_party() {
    let mut broker = Broker::new();
    let mut alice = Device::in_memory(dev(3), DeviceConfig::default()).unwrap();
    let mut john = Device::in_memory(dev(1), DeviceConfig::default()).unwrap();
    let c = alice.associate("John", dev(1), None).unwrap().contact_id;
    sync(&mut john, &mut broker, T0);
    alice.block(c, true).unwrap();
    sync(&mut alice, &mut broker, T0 + 1);
    assert_eq!(sync(&mut john, &mut broker, T0 + 2), vec![PushEffect::Blocked(dev(3))]);

    let pos = GeoPoint::new(38.7, -9.1).unwrap();
    let out = john.on_scan(&ScanResult::new(T0 + 3).with(dev(3), None), pos, &mut RecordingSink::default()).unwrap();
    assert!(out.events.is_empty());

    alice.block(c, false).unwrap();
    sync(&mut alice, &mut broker, T0 + 4);
    assert_eq!(sync(&mut john, &mut broker, T0 + 5), vec![PushEffect::Unblocked(dev(3))]);
    let out = john.on_scan(&ScanResult::new(T0 + 6).with(dev(3), None), pos, &mut RecordingSink::default()).unwrap();
    assert_eq!(out.events.len(), 1);
}
