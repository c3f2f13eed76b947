use moon::datamodel::{DatasetManifest, Grade};
use moon::model::PerOrgan;
use moon::synth::{synthesize_case, synthesize_dataset, SynthCase, SynthConfig, BASE};

fn cases(grade: Grade, n: u64, cfg: &SynthConfig) -> Vec<SynthCase> {
    (0..n).map(|i| synthesize_case(1000 + i, grade, cfg).unwrap()).collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn lesion_voxels(c: &SynthCase) -> f64 {
    c.lesion_mask.data().iter().filter(|&&m| m > 0.5).count() as f64
}

/// Mean absolute difference between neighbours along the last axis,
/// over voxels well inside the ROI.
fn roughness(c: &SynthCase) -> f64 {
    let v = &c.volumes[1];
    let [h, w, d] = v.dims();
    let mut acc = Vec::new();
    for x in h / 4..3 * h / 4 {
        for y in w / 4..3 * w / 4 {
            for z in d / 4..3 * d / 4 {
                acc.push((v.get(x, y, z + 1) - v.get(x, y, z)).abs() as f64);
            }
        }
    }
    mean(acc.into_iter())
}

fn bright_fraction(c: &SynthCase) -> f64 {
    let v = &c.volumes[2];
    v.data().iter().filter(|&&x| x as f64 > BASE + 0.075).count() as f64 / v.len() as f64
}

#[test]
fn g3_cases_carry_more_lesion_voxels_than_g1() {
    let cfg = SynthConfig::default();
    let g1 = mean(cases(Grade::G1, 100, &cfg).iter().map(lesion_voxels));
    let g3 = mean(cases(Grade::G3, 100, &cfg).iter().map(lesion_voxels));
    assert!(g3 > g1, "G1 {g1} vs G3 {g3}");
}

#[test]
fn designed_statistics_are_monotone_in_grade() {
    let cfg = SynthConfig::default();
    let by_grade: Vec<Vec<SynthCase>> = Grade::ALL.iter().map(|&g| cases(g, 100, &cfg)).collect();
    let stat = |f: &dyn Fn(&SynthCase) -> f64| -> Vec<f64> { by_grade.iter().map(|cs| mean(cs.iter().map(f))).collect() };
    for (name, s) in [
        ("blob count", stat(&|c| c.blob_count as f64)),
        ("lesion voxels", stat(&lesion_voxels)),
        ("liver roughness", stat(&roughness)),
        ("spleen bright fraction", stat(&bright_fraction)),
    ] {
        assert!(s[0] <= s[1] && s[1] <= s[2], "{name}: {s:?}");
    }
}

#[test]
fn esophagus_alone_leaves_g2_and_g3_overlapping() {
    let cfg = SynthConfig::default();
    let g2: Vec<usize> = cases(Grade::G2, 100, &cfg).iter().map(|c| c.blob_count).collect();
    let g3: Vec<usize> = cases(Grade::G3, 100, &cfg).iter().map(|c| c.blob_count).collect();
    let shared = (0..=6).filter(|k| g2.contains(k) && g3.contains(k)).count();
    assert!(shared >= 2);
}

#[test]
fn dataset_counts_follow_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = PerOrgan {
        esophagus: [4, 4, 4],
        liver: [4, 4, 4],
        spleen: [4, 4, 4],
    };
    for (counts, total) in [([8, 8, 8], 24), ([0, 0, 1], 1), ([331, 252, 427], 1010)] {
        let cfg = SynthConfig {
            counts,
            dims: tiny.clone(),
            ..SynthConfig::default()
        };
        let out = dir.path().join(format!("{total}"));
        let m = synthesize_dataset(&cfg, &out).unwrap();
        assert_eq!(m.len(), total);
        assert_eq!(m.grade_counts(), counts);
        let back = DatasetManifest::load(&out.join("manifest.json")).unwrap();
        assert_eq!(back, m);
        back.check_files(&out).unwrap();
    }
}

#[test]
fn unwritable_output_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(synthesize_dataset(&SynthConfig::default(), &blocker.join("sub")).is_err());
}
