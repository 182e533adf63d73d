use scalescan::bench::{sweep, BenchReport, KINDS};
use scalescan::config::Config;
use scalescan::ssm::BlockKind;

fn default_sweep(frames: &[usize]) -> BenchReport {
    sweep(&Config::default(), &KINDS, frames).unwrap()
}

fn ratio(rep: &BenchReport, kind: BlockKind, a: usize, b: usize) -> (f64, f64) {
    let (x, y) = (rep.row(kind, a).unwrap(), rep.row(kind, b).unwrap());
    let m = |r: &scalescan::bench::BenchRow| r.cost.measured_madds.unwrap() as f64;
    let p = |r: &scalescan::bench::BenchRow| r.cost.peak_scalars.unwrap() as f64;
    (m(y) / m(x), p(y) / p(x))
}

#[test]
fn eight_to_sixteen_frames() {
    let rep = default_sweep(&[8, 16]);
    let (att, _) = ratio(&rep, BlockKind::Attention, 8, 16);
    let (scan, scan_peak) = ratio(&rep, BlockKind::Mamba, 8, 16);
    assert!((3.5..=4.2).contains(&att), "attention x{att}");
    assert!((1.9..=2.1).contains(&scan), "mamba x{scan}");
    assert!((1.9..=2.1).contains(&scan_peak), "mamba peak x{scan_peak}");
    for row in &rep.rows {
        assert_eq!(row.cost.measured_madds, Some(row.cost.predicted_madds));
    }
}

#[test]
fn long_doublings_separate_the_blocks() {
    let rep = default_sweep(&[8, 16]);
    for g in &rep.doublings() {
        assert_eq!((g.from_tokens, g.to_tokens), (2040, 4080));
        match g.kind {
            BlockKind::Attention => assert!(g.madds_ratio > 3.2, "{g:?}"),
            _ => assert!(g.madds_ratio < 2.3, "{g:?}"),
        }
    }
    let att = rep.row(BlockKind::Attention, 16).unwrap();
    let l = att.cost.tokens as u64;
    assert!(att.cost.peak_scalars.unwrap() >= l * l);
}

#[test]
fn twelve_frames_is_3060_tokens_and_twenty_is_skipped() {
    let rep = default_sweep(&[12, 20]);
    assert_eq!(rep.row(BlockKind::Mamba, 12).unwrap().cost.tokens, 3060);
    assert!(rep.row(BlockKind::Attention, 20).is_none());
    assert!(rep.skipped.iter().any(|s| s.kind == BlockKind::Attention && s.frames == 20));
    assert!(rep.row(BlockKind::Mamba, 20).is_some());
}
