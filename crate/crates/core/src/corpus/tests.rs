use super::*;
use crate::geometry::{identify_target, parse_detections, DetectionStream, TARGET_IOU_THRESHOLD};
use crate::io::{decode_audio, decode_video};
use crate::split::pearson;

fn small_spec() -> SyntheticSessionSpec {
    SyntheticSessionSpec { participants: 6, group_size: 3, tasks: vec![Task::Talk, Task::Lego], frame_count: 64, frame_size: 16, ..Default::default() }
}

#[test]
fn round_robin_covers_every_pair_once() {
    for n in 2..8 {
        let mut seen = BTreeSet::new();
        for round in round_robin(n) {
            let mut busy = BTreeSet::new();
            for (a, b) in round {
                assert!(a < b && b < n);
                assert!(busy.insert(a) && busy.insert(b), "member twice in one round");
                assert!(seen.insert((a, b)), "pair repeated");
            }
        }
        assert_eq!(seen.len(), n * (n - 1) / 2);
    }
}

#[test]
fn same_seed_gives_identical_corpus() {
    let a = generate_synthetic(&small_spec(), 3).unwrap();
    let b = generate_synthetic(&small_spec(), 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.manifest.to_toml(), b.manifest.to_toml());
    let c = generate_synthetic(&small_spec(), 4).unwrap();
    assert_ne!(a.files, c.files);
}

#[test]
fn manifest_references_every_file_and_roundtrips() {
    let corpus = generate_synthetic(&small_spec(), 1).unwrap();
    let m = &corpus.manifest;
    let referenced: BTreeSet<&str> = m
        .sessions
        .iter()
        .flat_map(|s| &s.tasks)
        .flat_map(|t| t.video.iter().chain(&t.audio).chain(&t.detections))
        .map(String::as_str)
        .collect();
    let present: BTreeSet<&str> = corpus.files.keys().map(String::as_str).collect();
    assert_eq!(referenced, present);
    assert_eq!(SessionManifest::from_toml(&m.to_toml()).unwrap(), *m);
    // 2 groups of 3, 2 rounds of one pair each.
    assert_eq!(m.sessions.len(), 4);
    assert_eq!(m.session_records().len(), 4);
    for s in &m.sessions {
        assert!(s.task(Task::Talk).unwrap().difficulty.is_none());
        assert!(s.task(Task::Lego).unwrap().difficulty.is_some());
        let orders: BTreeSet<u32> = s.tasks.iter().map(|t| t.order).collect();
        assert_eq!(orders, BTreeSet::from([1, 2]));
    }
}

#[test]
fn media_decode_and_target_is_found() {
    let corpus = generate_synthetic(&small_spec(), 2).unwrap();
    let rec = corpus.manifest.sessions[0].task(Task::Talk).unwrap();
    for i in 0..2 {
        let v = decode_video(&corpus.read(&rec.video[i]).unwrap()).unwrap();
        assert_eq!((v.frame_count(), v.height(), v.width()), (64, 16, 16));
        let a = decode_audio(&corpus.read(&rec.audio[i]).unwrap()).unwrap();
        assert_eq!(a.samples.len(), 112_896);
        let text = String::from_utf8(corpus.read(&rec.detections[i]).unwrap()).unwrap();
        let boxes = parse_detections(&text).unwrap();
        let stream = DetectionStream::new(64, (16.0, 16.0), boxes).unwrap();
        let target = identify_target(&stream, TARGET_IOU_THRESHOLD).unwrap();
        assert!(target.width() > 5.0);
    }
    assert!(corpus.read("missing").is_err());
}

#[test]
fn manifest_validation() {
    let corpus = generate_synthetic(&small_spec(), 1).unwrap();
    let mut m = corpus.manifest.clone();
    m.participants.push(m.participants[0].clone());
    assert!(m.validate().is_err());
    let mut m = corpus.manifest.clone();
    m.sessions[0].participants[1] = "nobody".into();
    assert!(m.validate().is_err());
    let mut m = corpus.manifest.clone();
    m.sessions[0].tasks[0].video[0] = "../escape.vid".into();
    assert!(m.validate().is_err());
    let mut m = corpus.manifest.clone();
    m.sessions[0].participants[1] = m.sessions[0].participants[0].clone();
    assert!(m.validate().is_err());
    assert!(SessionManifest::from_toml("participants = 3").is_err());
}

#[test]
fn spec_validation() {
    assert!(generate_synthetic(&SyntheticSessionSpec { participants: 5, group_size: 4, ..small_spec() }, 0).is_err());
    assert!(generate_synthetic(&SyntheticSessionSpec { metadata_effect: f64::NAN, ..small_spec() }, 0).is_err());
    assert!(generate_synthetic(&SyntheticSessionSpec { sessions_per_participant: 6, ..small_spec() }, 0).is_err());
    assert!(generate_synthetic(&SyntheticSessionSpec { tasks: vec![Task::Talk, Task::Talk], ..small_spec() }, 0).is_err());
}

/// Per participant: mean red value of the face region, audio RMS, and the
/// mean pre-session mood, from the participant's first session.
fn summaries(corpus: &SyntheticCorpus) -> Vec<([f64; 3], [f64; 5])> {
    let m = &corpus.manifest;
    let mut out = vec![];
    for p in &m.participants {
        let (s, i) = m
            .sessions
            .iter()
            .find_map(|s| s.participants.iter().position(|x| *x == p.id).map(|i| (s, i)))
            .unwrap();
        let rec = &s.tasks[0];
        let v = decode_video(&corpus.read(&rec.video[i]).unwrap()).unwrap();
        let c = v.width() / 2;
        let red = (0..v.frame_count()).map(|f| v.pixel(f, c, c, 0)).sum::<f64>() / v.frame_count() as f64;
        let a = decode_audio(&corpus.read(&rec.audio[i]).unwrap()).unwrap();
        let rms = (a.samples.iter().map(|x| x * x).sum::<f64>() / a.samples.len() as f64).sqrt();
        let mood = s.states[i].pre_mood.iter().sum::<f64>() / 8.0;
        out.push(([red, rms, mood], p.personality));
    }
    out
}

/// Pearson correlation of a summary statistic with the label it would carry
/// when planted: face red with O, audio RMS and mean mood with the trait sum.
fn linked_correlation(rows: &[([f64; 3], [f64; 5])], stat: usize) -> f64 {
    let x: Vec<f64> = rows.iter().map(|r| r.0[stat]).collect();
    let y: Vec<f64> = rows.iter().map(|r| if stat == 0 { r.1[0] } else { r.1.iter().sum() }).collect();
    pearson(&x, &y).unwrap()
}

#[test]
fn zero_effect_media_is_independent_of_labels() {
    let spec = SyntheticSessionSpec {
        participants: 100,
        group_size: 2,
        sessions_per_participant: 1,
        tasks: vec![Task::Talk],
        frame_count: 8,
        frame_size: 16,
        metadata_effect: 0.0,
        video_effect: 0.0,
        audio_effect: 0.0,
        ..Default::default()
    };
    let rows = summaries(&generate_synthetic(&spec, 17).unwrap());
    assert_eq!(rows.len(), 100);
    let r = linked_correlation(&rows, 0).abs();
    assert!(r < 0.2, "face red vs O: {r}");
    let planted = SyntheticSessionSpec { metadata_effect: 1.0, video_effect: 1.0, audio_effect: 1.0, ..spec };
    let rows = summaries(&generate_synthetic(&planted, 17).unwrap());
    for stat in 0..3 {
        let r = linked_correlation(&rows, stat);
        assert!(r > 0.3, "statistic {stat}: {r}");
    }
}
