use std::ffi::CStr;
use std::ptr;

use entrywise_ffi::*;

fn last_error() -> String {
    let p = ew_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// A rank-one 12x12 grid of counts with a few zeroed cells.
fn grid() -> (Vec<usize>, Vec<usize>, Vec<u64>) {
    let (mut r, mut c, mut k) = (vec![], vec![], vec![]);
    for i in 0..12 {
        for j in 0..12 {
            r.push(i);
            c.push(j);
            let base = 2 + (i % 3) as u64 + (j % 4) as u64;
            k.push(if (i * 12 + j) % 17 == 0 { 0 } else { base });
        }
    }
    (r, c, k)
}

unsafe fn observations() -> *mut EwObservations {
    let (r, c, k) = grid();
    let mut obs = ptr::null_mut();
    let s = ew_observations_new(12, 12, r.as_ptr(), c.as_ptr(), k.as_ptr(), r.len(), &mut obs);
    assert_eq!(s, EwStatus::Ok);
    obs
}

#[test]
fn detect_round_trip() {
    unsafe {
        let obs = observations();
        assert_eq!(ew_observations_len(obs), 144);
        let mut cfg = ew_config_default(1, EwModel::Zero);
        cfg.gamma = 0.1;
        let mut det = ptr::null_mut();
        assert_eq!(ew_detect(obs, &cfg, &mut det), EwStatus::Ok);
        assert_eq!(ew_detection_len(det), 144);

        let mut total = 0.0;
        let mut e = EwEntry::default();
        for i in 0..ew_detection_len(det) {
            assert_eq!(ew_detection_entry(det, i, &mut e), EwStatus::Ok);
            assert!((0.0..=1.0).contains(&e.t));
            assert!(e.f_l <= e.f_point && e.f_point <= e.f_r);
            total += e.t;
        }
        assert_eq!(ew_detection_entry(det, 144, &mut e), EwStatus::InvalidInput);
        assert!(last_error().contains("out of range"));

        let (mut p, mut len) = (f64::NAN, usize::MAX);
        assert_eq!(ew_detection_theta(det, &mut p, ptr::null_mut(), 0, &mut len), EwStatus::Ok);
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(len, 0);

        assert_eq!(ew_detection_solve(det, 1.0), EwStatus::Ok);
        let mut wider = 0.0;
        for i in 0..ew_detection_len(det) {
            ew_detection_entry(det, i, &mut e);
            wider += e.t;
        }
        assert!(wider >= total - 1e-12);

        ew_detection_free(det);
        ew_observations_free(obs);
    }
}

#[test]
fn detection_matches_library() {
    use entrywise::detector::run_ew;
    use entrywise::{DetectorConfig, Entry, ModelId, SparseObservations, TheoreticalConstants};

    let (r, c, k) = grid();
    let entries = (0..r.len()).map(|i| Entry { row: r[i], col: c[i], count: k[i] }).collect();
    let lib_obs = SparseObservations::from_entries(12, 12, entries).unwrap();
    let mut lib_cfg = DetectorConfig::new(1, ModelId::PoissonThinned);
    lib_cfg.seed = 9;
    let expected = run_ew(&lib_obs, &lib_cfg, &TheoreticalConstants::default()).unwrap();

    unsafe {
        let obs = observations();
        let mut cfg = ew_config_default(1, EwModel::PoissonThinned);
        cfg.seed = 9;
        let mut det = ptr::null_mut();
        assert_eq!(ew_detect(obs, &cfg, &mut det), EwStatus::Ok);
        let mut e = EwEntry::default();
        for (i, t) in expected.solution.t.iter().enumerate() {
            ew_detection_entry(det, i, &mut e);
            assert_eq!(e.t, *t);
        }
        let (mut p, mut alpha, mut len) = (0.0, [0.0f64; 2], 0usize);
        ew_detection_theta(det, &mut p, alpha.as_mut_ptr(), 2, &mut len);
        assert_eq!(len, 1);
        assert_eq!(p, expected.fit.theta_hat.p_anom);
        assert_eq!(alpha[0], expected.fit.theta_hat.alpha[0]);
        ew_detection_free(det);
        ew_observations_free(obs);
    }
}

#[test]
fn invalid_inputs_report_codes() {
    unsafe {
        let mut obs = ptr::null_mut();
        let (r, c, k) = ([0usize, 5], [0usize, 0], [1u64, 2]);
        let s = ew_observations_new(3, 3, r.as_ptr(), c.as_ptr(), k.as_ptr(), 2, &mut obs);
        assert_eq!(s, EwStatus::InvalidInput);
        assert!(obs.is_null());
        assert!(last_error().contains("out of range"));

        let s = ew_observations_new(3, 3, ptr::null(), ptr::null(), ptr::null(), 2, &mut obs);
        assert_eq!(s, EwStatus::NullPointer);

        let cfg = ew_config_default(1, EwModel::Zero);
        let mut det = ptr::null_mut();
        assert_eq!(ew_detect(ptr::null(), &cfg, &mut det), EwStatus::NullPointer);

        let obs = observations();
        let bad = ew_config_default(50, EwModel::Zero);
        assert_eq!(ew_detect(obs, &bad, &mut det), EwStatus::InvalidInput);
        assert!(det.is_null());
        ew_observations_free(obs);

        ew_observations_free(ptr::null_mut());
        ew_detection_free(ptr::null_mut());
        assert_eq!(ew_detection_len(ptr::null()), 0);
    }
}

#[test]
fn success_clears_error() {
    unsafe {
        let mut out = 0.0;
        let (x, y) = ([0.5, 0.0], [1.0, 0.0]);
        assert_eq!(ew_auc(x.as_ptr(), y.as_ptr(), 2, &mut out), EwStatus::InvalidInput);
        assert!(last_error().contains("unsorted"));
        let (x, y) = ([0.0, 0.5, 1.0], [0.0, 1.0, 1.0]);
        assert_eq!(ew_auc(x.as_ptr(), y.as_ptr(), 3, &mut out), EwStatus::Ok);
        assert!((out - 0.75).abs() < 1e-15);
        assert!(ew_last_error_message().is_null());
    }
}
