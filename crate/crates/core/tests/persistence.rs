use awarenet_core::device::{Device, DeviceConfig, DeviceError};
use awarenet_core::feedback::RecordingSink;
use awarenet_core::model::{DeviceId, GeoPoint, NoteBody, Place};
use awarenet_core::presence::ScanResult;
use awarenet_core::store::ClientStore;
use awarenet_core::triggers::TriggerRef;

fn dev(n: u8) -> DeviceId {
    DeviceId::from_bytes([0x02, 0, 0, 0, 0, n])
}

const T0: i64 = 1_374_735_600_000;

#[test]
fn store_survives_reopen_and_compaction() {
    let tmp = tempfile::tempdir().unwrap();
    let (note, loc) = {
        let mut s = ClientStore::open(tmp.path()).unwrap();
        s.set_owner(dev(1)).unwrap();
        s.set_compaction_interval(4);
        let loc = s.insert_location(Place::Indoor { beacon: dev(0xB1) }, "hall").unwrap();
        let note = s.create_note(NoteBody::Text("hello".into()), T0).unwrap();
        for i in 0..10 {
            s.create_note(NoteBody::Text(format!("n{i}")), T0 + i).unwrap();
        }
        (note, loc)
    };
    let s = ClientStore::open(tmp.path()).unwrap();
    assert_eq!(s.owner().unwrap(), dev(1));
    assert_eq!(s.get_note(note.id), Some(note));
    assert_eq!(s.get_location(loc.location_id), Some(&loc));
    assert_eq!(s.list_notes().len(), 11);
}

#[test]
fn deleted_note_ids_are_never_reused() {
    let tmp = tempfile::tempdir().unwrap();
    let first = {
        let mut s = ClientStore::open(tmp.path()).unwrap();
        s.set_owner(dev(1)).unwrap();
        let n = s.create_note(NoteBody::Text("x".into()), T0).unwrap();
        s.delete_note(n.id).unwrap();
        n.id
    };
    let mut s = ClientStore::open(tmp.path()).unwrap();
    assert!(s.get_note(first).is_none());
    let next = s.create_note(NoteBody::Text("y".into()), T0).unwrap();
    assert!(next.id.seq > first.seq);
}

#[test]
fn device_keeps_presence_and_latches_across_restart() {
    let tmp = tempfile::tempdir().unwrap();
    let pos = GeoPoint::new(38.7, -9.1).unwrap();
    let mut sink = RecordingSink::default();
    {
        let mut d = Device::open(tmp.path(), Some(dev(1)), DeviceConfig::default()).unwrap();
        let c = d.associate("Jules", dev(2), None).unwrap().contact_id;
        let n = d.create_note(NoteBody::Text("milk".into()), T0).unwrap().id;
        d.attach(n, TriggerRef::Person(c)).unwrap();
        let out = d.on_scan(&ScanResult::new(T0).with(dev(2), None), pos, &mut sink).unwrap();
        assert_eq!(out.notifications.len(), 2);
        d.save().unwrap();
    }
    let mut d = Device::open(tmp.path(), None, DeviceConfig::default()).unwrap();
    assert_eq!(d.near(T0 + 1).len(), 1);
    // still the same session, so neither the person alert nor the note repeat
    let out = d.on_scan(&ScanResult::new(T0 + 30_000).with(dev(2), None), pos, &mut sink).unwrap();
    assert!(out.events.is_empty());
    assert!(out.notifications.is_empty());
    assert_eq!(d.notifications().len(), 2);
}

#[test]
fn device_rejects_a_different_owner() {
    let tmp = tempfile::tempdir().unwrap();
    Device::open(tmp.path(), Some(dev(1)), DeviceConfig::default()).unwrap().save().unwrap();
    assert!(Device::open(tmp.path(), Some(dev(2)), DeviceConfig::default()).is_err());
    let fresh = tempfile::tempdir().unwrap();
    assert!(matches!(Device::open(fresh.path(), None, DeviceConfig::default()), Err(DeviceError::Store(_))));
}
