use std::io::Write;

use exitcde::data::{
    drop_observations, generate_synthetic, load_csv, save_csv, split, CsvSchema, Dataset, Normalizer, SyntheticKind,
    Task,
};
use exitcde::interp::{Label, TimeSeriesSample};
use exitcde::Error;

fn write_csv(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

#[test]
fn three_rows_give_terminal_two() {
    let f = write_csv("sample_id,t,c1,label\na,0,1.0,1\na,1,2.0,1\na,2,3.0,1\n");
    let ds = load_csv(f.path(), &CsvSchema::default()).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.samples[0].terminal_time(), 2.0);
    assert_eq!(ds.samples[0].times, vec![0.0, 1.0, 2.0]);
    assert_eq!(ds.task, Task::Classification { classes: 2 });
}

#[test]
fn long_sample_terminal_is_rows_minus_one() {
    let mut text = String::from("sample_id,t,c1,label\n");
    for i in 0..182 {
        text.push_str(&format!("s,{},{},3\n", 0.5 * i as f64, (i as f64).sin()));
    }
    let ds = load_csv(write_csv(&text).path(), &CsvSchema::default()).unwrap();
    assert_eq!(ds.samples[0].terminal_time(), 181.0);
}

#[test]
fn missing_cells_and_errors_carry_lines() {
    let f = write_csv("sample_id,t,c1,c2,label\na,0,1.0,,0\na,1,,2.0,0\na,2,3.0,4.0,0\n");
    let ds = load_csv(f.path(), &CsvSchema::default()).unwrap();
    assert_eq!(ds.samples[0].values[0], vec![Some(1.0), None]);
    assert_eq!(ds.samples[0].values[1], vec![None, Some(2.0)]);

    let bad = write_csv("sample_id,t,c1,label\na,0,1.0,0\na,1,oops,0\n");
    match load_csv(bad.path(), &CsvSchema::default()) {
        Err(Error::Data { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let back = write_csv("sample_id,t,c1,label\na,0,1.0,0\na,2,1.0,0\na,1,1.0,0\n");
    match load_csv(back.path(), &CsvSchema::default()) {
        Err(Error::Data { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn forecasting_schema_splits_target_rows() {
    let mut text = String::from("sample_id,t,c1,c2\n");
    for i in 0..8 {
        text.push_str(&format!("x,{i},{},{}\n", i, 10 * i));
    }
    let schema = CsvSchema {
        label_column: None,
        horizon: Some(3),
        ..Default::default()
    };
    let ds = load_csv(write_csv(&text).path(), &schema).unwrap();
    assert_eq!(ds.task, Task::Forecasting { horizon: 3, channels: 2 });
    assert_eq!(ds.samples[0].len(), 5);
    assert_eq!(ds.samples[0].label, Some(Label::Target(vec![5.0, 50.0, 6.0, 60.0, 7.0, 70.0])));
}

#[test]
fn save_load_round_trip() {
    let ds = generate_synthetic(SyntheticKind::DampedSpiralClassification, 6, 3).unwrap();
    let ds = drop_observations(&ds, 0.3, 1, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    save_csv(&ds, &p).unwrap();
    let back = load_csv(&p, &CsvSchema::default()).unwrap();
    assert_eq!(back.samples, ds.samples);

    let fc = generate_synthetic(SyntheticKind::ArForecasting, 3, 4).unwrap();
    save_csv(&fc, &p).unwrap();
    let schema = CsvSchema {
        horizon: Some(10),
        ..Default::default()
    };
    let back = load_csv(&p, &schema).unwrap();
    assert_eq!(back.samples, fc.samples);
}

fn ramp(n: usize) -> Dataset {
    let times = (0..n).map(|i| i as f64).collect();
    let rows = (0..n).map(|i| vec![i as f64]).collect();
    Dataset::new(vec![TimeSeriesSample::dense(times, rows, Some(Label::Class(0))).unwrap()], Task::Classification { classes: 1 }).unwrap()
}

#[test]
fn drop_ratio_zero_is_identity() {
    let ds = ramp(30);
    assert_eq!(drop_observations(&ds, 0.0, 5, false).unwrap(), ds);
}

#[test]
fn drop_half_of_hundred() {
    let ds = ramp(100);
    let out = drop_observations(&ds, 0.5, 9, false).unwrap();
    let s = &out.samples[0];
    assert_eq!(s.values.iter().filter(|r| r[0].is_none()).count(), 50);
    assert!(s.values[0][0].is_some() && s.values[99][0].is_some());
    assert_eq!(s.terminal_time(), 99.0);
    assert_eq!(drop_observations(&ds, 0.5, 9, false).unwrap(), out);
    assert_ne!(drop_observations(&ds, 0.5, 10, false).unwrap(), out);
}

#[test]
fn whole_row_drop_keeps_endpoints() {
    let ds = ramp(20);
    let out = drop_observations(&ds, 0.5, 2, true).unwrap();
    let s = &out.samples[0];
    assert_eq!(s.len(), 10);
    assert_eq!((s.times[0], s.terminal_time()), (0.0, 19.0));
}

#[test]
fn drop_that_starves_a_channel_fails() {
    assert!(drop_observations(&ramp(3), 0.9, 0, false).is_err());
    assert!(drop_observations(&ramp(10), 1.0, 0, false).is_err());
}

#[test]
fn synthetic_sine_shape_and_determinism() {
    let a = generate_synthetic(SyntheticKind::TwoFreqSineClassification, 10, 7).unwrap();
    let b = generate_synthetic(SyntheticKind::TwoFreqSineClassification, 10, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples[0].len(), 50);
    assert_eq!(a.samples[3].class(), Some(1));
    assert!(generate_synthetic(SyntheticKind::ArForecasting, 0, 1).is_err());
    let fc = generate_synthetic(SyntheticKind::ArForecasting, 2, 1).unwrap();
    assert_eq!(fc.task, Task::Forecasting { horizon: 10, channels: 2 });
}

#[test]
fn split_fractions_and_stratification() {
    let ds = generate_synthetic(SyntheticKind::TwoFreqSineClassification, 300, 1).unwrap();
    let (tr, va, te) = split(&ds, (1.0, 0.0, 0.0), 0).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (300, 0, 0));

    let (tr, va, te) = split(&ds, (2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0), 4).unwrap();
    assert_eq!(tr.len() + va.len() + te.len(), 300);
    for part in [&tr, &va, &te] {
        let ones = part.samples.iter().filter(|s| s.class() == Some(1)).count() as f64;
        let expected = part.len() as f64 * 0.5;
        assert!((ones - expected).abs() <= 1.0, "{ones} vs {expected}");
    }
    let again = split(&ds, (2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0), 4).unwrap();
    assert_eq!(again.0, tr);
    assert!(split(&ds, (0.5, 0.2, 0.2), 0).is_err());
}

#[test]
fn normalizer_uses_only_the_fitted_split() {
    let ds = generate_synthetic(SyntheticKind::ArForecasting, 20, 2).unwrap();
    let (tr, va, _) = split(&ds, (0.5, 0.5, 0.0), 0).unwrap();
    let norm = Normalizer::fit(&tr).unwrap();
    let trn = tr.normalized(&norm);
    let mean: f64 = trn.samples.iter().flat_map(|s| s.values.iter().map(|r| r[0].unwrap())).sum::<f64>()
        / trn.samples.iter().map(|s| s.len()).sum::<usize>() as f64;
    assert!(mean.abs() < 1e-12);
    let van = va.normalized(&norm);
    let raw = va.samples[0].values[3][1].unwrap();
    assert_eq!(van.samples[0].values[3][1].unwrap(), (raw - norm.mean[1]) / norm.scale[1]);

    let targets: Vec<f64> = trn
        .samples
        .iter()
        .flat_map(|s| match &s.label {
            Some(Label::Target(t)) => t.iter().step_by(2).copied().collect::<Vec<_>>(),
            _ => unreachable!(),
        })
        .collect();
    let m = targets.iter().sum::<f64>() / targets.len() as f64;
    let v = targets.iter().map(|x| (x - m).powi(2)).sum::<f64>() / targets.len() as f64;
    assert!(m.abs() < 1e-12);
    assert!((v - 1.0).abs() < 1e-12);
    let mut back = match &van.samples[0].label {
        Some(Label::Target(t)) => t.clone(),
        _ => unreachable!(),
    };
    norm.denormalize_target(&mut back);
    match &va.samples[0].label {
        Some(Label::Target(t)) => {
            for (a, b) in back.iter().zip(t) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        _ => unreachable!(),
    }
}

#[test]
fn target_columns_select_forecast_channels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    let mut text = String::from("sample_id,t,a,b,c\n");
    for i in 0..6 {
        text.push_str(&format!("s,{i},{},{},{}\n", i, 10 * i, 100 * i));
    }
    std::fs::write(&path, text).unwrap();
    let schema = CsvSchema {
        label_column: None,
        horizon: Some(2),
        target_columns: vec!["c".into(), "a".into()],
        ..CsvSchema::default()
    };
    let ds = load_csv(&path, &schema).unwrap();
    assert_eq!(ds.task, Task::Forecasting { horizon: 2, channels: 2 });
    assert_eq!(ds.channels(), 3);
    assert_eq!(ds.samples[0].label, Some(Label::Target(vec![400.0, 4.0, 500.0, 5.0])));

    let bad = CsvSchema {
        target_columns: vec!["zz".into()],
        ..schema
    };
    assert!(load_csv(&path, &bad).is_err());
}

#[test]
fn unlabeled_inputs_keep_every_row() {
    let f = write_csv("sample_id,t,a,b\nq,0,1,2\nq,1,3,\nq,2,5,6\nr,0,0,0\nr,4,1,1\n");
    let schema = CsvSchema {
        label_column: None,
        horizon: Some(1),
        ..CsvSchema::default()
    };
    let (ids, samples) = exitcde::data::load_unlabeled_csv(f.path(), &schema).unwrap();
    assert_eq!(ids, vec!["q".to_string(), "r".to_string()]);
    assert_eq!(samples[0].len(), 3);
    assert_eq!(samples[0].label, None);
    assert_eq!(samples[0].values[1], vec![Some(3.0), None]);
    assert_eq!(samples[1].times, vec![0.0, 1.0]);
}
