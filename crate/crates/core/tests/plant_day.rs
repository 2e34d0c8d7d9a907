use bess_core::analytics::{rte, LedgerRow};
use bess_core::model::{apply_soh, Scenario, SystemConfig};
use bess_core::plant::{simulate, PlantState};
use chrono::NaiveDate;

#[test]
fn alternating_day_roundtrip_efficiency() {
    let spec = apply_soh(&SystemConfig::default_config().system, &Scenario::new(1.0)).unwrap();
    let t0 = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    // One hour of charging then one hour of discharging at a quarter of rated power.
    let targets: Vec<f64> = (0..24 * 60).map(|k| if (k / 60) % 2 == 0 { 45e3 } else { -45e3 }).collect();
    let (steps, end) = simulate(&spec, PlantState::new(0.6, t0), &targets, 60).unwrap();
    assert!(steps.iter().all(|s| s.clip.is_none()));

    let (mut e_in, mut e_out) = (0.0, 0.0);
    for s in &steps {
        let e = s.p_ac_w * s.dt_s / 3600.0;
        if e >= 0.0 {
            e_in += e;
        } else {
            e_out -= e;
        }
    }
    let expected = e_out / (e_in - spec.e_nom_wh * (end.soc - 0.6));
    assert!((0.88..=0.96).contains(&expected), "{expected}");

    let ledger: Vec<LedgerRow> = steps.iter().map(|s| LedgerRow::from_step(s, 50.0, s.p_target_w)).collect();
    assert_eq!(rte(&ledger, spec.e_nom_wh).unwrap(), expected);
}

#[test]
fn higher_resistance_never_delivers_more() {
    let base = SystemConfig::default_config().system;
    let t0 = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let targets: Vec<f64> = (0..600).map(|k| if (k / 100) % 2 == 0 { -180e3 } else { 150e3 }).collect();
    let delivered = |soh: f64| -> f64 {
        let spec = apply_soh(&base, &Scenario::new(soh)).unwrap();
        let (steps, _) = simulate(&spec, PlantState::new(0.9, t0), &targets, 60).unwrap();
        steps.iter().map(|s| (-s.p_ac_w).max(0.0) / 60.0).sum()
    };
    let d: Vec<f64> = [1.0, 2.0, 3.0, 4.0].map(delivered).to_vec();
    assert!(d.windows(2).all(|w| w[1] <= w[0]), "{d:?}");
}
