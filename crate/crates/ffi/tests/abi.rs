use std::ffi::{CStr, CString};
use std::ptr;

use attention_vig_ffi::*;

fn last_error() -> String {
    let p = avig_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn micro(seed: u64) -> *mut AvigModel {
    let mut m = ptr::null_mut();
    let name = CString::new("Micro").unwrap();
    assert_eq!(unsafe { avig_model_from_preset(name.as_ptr(), seed, &mut m) }, AvigStatus::Ok);
    assert!(!m.is_null());
    m
}

fn image(seed: u64, n: usize) -> Vec<f64> {
    (0..n * 3 * 32 * 32)
        .map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0)
        .collect()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(avig_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_lifecycle_and_counts() {
    let m = micro(0);
    let (mut params, mut classes, mut flops) = (0u64, 0usize, 0u64);
    unsafe {
        assert_eq!(avig_model_num_params(m, &mut params), AvigStatus::Ok);
        assert_eq!(avig_model_num_classes(m, &mut classes), AvigStatus::Ok);
        assert_eq!(avig_model_flops(m, 32, &mut flops), AvigStatus::Ok);
        avig_model_free(m);
    }
    assert!(params > 0 && flops > 0);
    assert_eq!(classes, 4);
    assert!(avig_last_error().is_null());
}

#[test]
fn unknown_preset_is_a_config_error_with_a_message() {
    let mut m = ptr::null_mut();
    let name = CString::new("XL").unwrap();
    assert_eq!(unsafe { avig_model_from_preset(name.as_ptr(), 0, &mut m) }, AvigStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("XL"));
}

#[test]
fn null_arguments_are_reported_not_dereferenced() {
    let mut out = 0u64;
    assert_eq!(unsafe { avig_model_num_params(ptr::null(), &mut out) }, AvigStatus::NullPointer);
    assert!(last_error().contains("model"));
    assert_eq!(unsafe { avig_model_from_preset(ptr::null(), 0, ptr::null_mut()) }, AvigStatus::NullPointer);
    unsafe {
        avig_model_free(ptr::null_mut());
        avig_graph_free(ptr::null_mut());
    }
}

#[test]
fn invalid_utf8_is_rejected() {
    let bad = [0xffu8, 0xfe, 0];
    let mut m = ptr::null_mut();
    let status = unsafe { avig_model_from_preset(bad.as_ptr().cast(), 0, &mut m) };
    assert_eq!(status, AvigStatus::InvalidUtf8);
}

#[test]
fn predict_matches_after_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.avig").to_str().unwrap()).unwrap();
    let m = micro(3);
    let x = image(1, 2);
    let mut a = vec![0.0; 8];
    let mut b = vec![0.0; 8];
    let mut loaded = ptr::null_mut();
    unsafe {
        assert_eq!(avig_model_predict(m, x.as_ptr(), 2, 3, 32, 32, a.as_mut_ptr(), a.len()), AvigStatus::Ok);
        assert_eq!(avig_model_save(m, path.as_ptr()), AvigStatus::Ok);
        assert_eq!(avig_model_load(path.as_ptr(), &mut loaded), AvigStatus::Ok);
        assert_eq!(avig_model_predict(loaded, x.as_ptr(), 2, 3, 32, 32, b.as_mut_ptr(), b.len()), AvigStatus::Ok);
        avig_model_free(m);
        avig_model_free(loaded);
    }
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn predict_rejects_short_buffers_and_bad_shapes() {
    let m = micro(0);
    let x = image(0, 1);
    let mut small = vec![0.0; 3];
    unsafe {
        let s = avig_model_predict(m, x.as_ptr(), 1, 3, 32, 32, small.as_mut_ptr(), small.len());
        assert_eq!(s, AvigStatus::BufferTooSmall);
        let mut logits = vec![0.0; 4];
        let s = avig_model_predict(m, x.as_ptr(), 1, 3, 30, 30, logits.as_mut_ptr(), logits.len());
        assert_ne!(s, AvigStatus::Ok);
        assert!(!last_error().is_empty());
        avig_model_free(m);
    }
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let path = CString::new("/nonexistent/dir/m.avig").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { avig_model_load(path.as_ptr(), &mut m) }, AvigStatus::Io);
}

#[test]
fn heatmap_covers_the_first_grid() {
    let m = micro(5);
    let x = image(2, 1);
    let mut values = vec![f64::NAN; 64];
    let (mut h, mut w) = (0, 0);
    unsafe {
        let s = avig_model_heatmap(m, x.as_ptr(), 3, 32, 32, 2, 5, values.as_mut_ptr(), 64, &mut h, &mut w);
        assert_eq!(s, AvigStatus::Ok, "{}", last_error());
        let s = avig_model_heatmap(m, x.as_ptr(), 3, 32, 32, 8, 0, values.as_mut_ptr(), 64, &mut h, &mut w);
        assert_eq!(s, AvigStatus::InvalidInput);
        avig_model_free(m);
    }
    assert_eq!((h, w), (8, 8));
    assert!(values.iter().all(|v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(v)));
}

#[test]
fn svga_graph_neighbors() {
    let mut g = ptr::null_mut();
    let (mut count, mut len) = (0, 0);
    let mut buf = [usize::MAX; 8];
    unsafe {
        assert_eq!(avig_graph_svga(8, 8, &mut g), AvigStatus::Ok);
        assert_eq!(avig_graph_node_count(g, &mut count), AvigStatus::Ok);
        assert_eq!(avig_graph_neighbors(g, 0, buf.as_mut_ptr(), buf.len(), &mut len), AvigStatus::Ok);
        assert_eq!(&buf[..len], &[2, 4, 6, 16, 32, 48]);
        let mut tiny = [0usize; 2];
        assert_eq!(avig_graph_neighbors(g, 0, tiny.as_mut_ptr(), 2, &mut len), AvigStatus::BufferTooSmall);
        assert_eq!(len, 6);
        assert_eq!(tiny, [0, 0]);
        assert_eq!(avig_graph_neighbors(g, 64, buf.as_mut_ptr(), 8, &mut len), AvigStatus::InvalidInput);
        avig_graph_free(g);
    }
    assert_eq!(count, 64);
}

#[test]
fn knn_graph_and_its_errors() {
    let f = [0.0, 1.0, 10.0];
    let mut g = ptr::null_mut();
    let mut len = 0;
    let mut buf = [0usize; 2];
    unsafe {
        assert_eq!(avig_graph_knn(f.as_ptr(), 3, 1, 1, &mut g), AvigStatus::Ok);
        assert_eq!(avig_graph_neighbors(g, 2, buf.as_mut_ptr(), 2, &mut len), AvigStatus::Ok);
        assert_eq!(&buf[..len], &[1]);
        avig_graph_free(g);
        let mut g2 = ptr::null_mut();
        assert_eq!(avig_graph_knn(f.as_ptr(), 3, 1, 3, &mut g2), AvigStatus::Config);
        assert!(g2.is_null());
    }
}
