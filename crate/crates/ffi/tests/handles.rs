use std::ffi::{c_char, CString};
use std::ptr;

use condattack::generator::{Generator, GeneratorConfig};
use condattack::zoo::{Arch, Classifier};
use condattack_ffi::*;
use rand::SeedableRng;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { ca_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn images(n: usize) -> Vec<f32> {
    (0..n * 3 * 16 * 16).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()
}

#[test]
fn classifier_and_attack_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Classifier::new(Arch::Wide, [3, 16, 16], 5, 3);
    model.save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut h: *mut CaClassifier = ptr::null_mut();
    assert_eq!(unsafe { ca_classifier_load(cpath.as_ptr(), &mut h) }, CaStatus::Ok);
    let mut k = 0usize;
    assert_eq!(unsafe { ca_classifier_num_classes(h, &mut k) }, CaStatus::Ok);
    assert_eq!(k, 5);

    let x = images(4);
    let mut labels = [0u32; 4];
    let mut probs = [0f32; 20];
    let st = unsafe { ca_classifier_predict(h, x.as_ptr(), 4, 3, 16, 16, labels.as_mut_ptr(), probs.as_mut_ptr()) };
    assert_eq!(st, CaStatus::Ok);
    let direct = model
        .predict(&condattack::Tensor::from_vec(&[4, 3, 16, 16], x.clone()).unwrap())
        .unwrap();
    assert_eq!(labels.iter().map(|&l| l as usize).collect::<Vec<_>>(), direct.labels);
    assert_eq!(&probs[..], direct.probabilities.data());

    let targets = [1u32, 2, 3, 4];
    let mut adv = vec![0f32; x.len()];
    let method = CString::new("bim").unwrap();
    let eps = 8.0 / 255.0;
    let st = unsafe {
        ca_attack(
            h,
            method.as_ptr(),
            eps,
            3,
            0,
            x.as_ptr(),
            4,
            3,
            16,
            16,
            targets.as_ptr(),
            adv.as_mut_ptr(),
        )
    };
    assert_eq!(st, CaStatus::Ok);
    assert!(adv.iter().zip(&x).all(|(a, b)| (a - b).abs() <= eps as f32 + 1e-6));

    let bad = CString::new("fgsm").unwrap();
    let st = unsafe {
        ca_attack(
            h,
            bad.as_ptr(),
            eps,
            3,
            0,
            x.as_ptr(),
            4,
            3,
            16,
            16,
            targets.as_ptr(),
            adv.as_mut_ptr(),
        )
    };
    assert_eq!(st, CaStatus::InvalidParameter);
    assert!(last_error().contains("fgsm"));

    let st = unsafe { ca_classifier_predict(h, x.as_ptr(), 4, 3, 8, 8, labels.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, CaStatus::InvalidInput);
    unsafe { ca_classifier_free(h) };
}

#[test]
fn generator_handle_respects_budget() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    let cfg = GeneratorConfig {
        base_channels: 4,
        residual_blocks: 1,
        num_classes: 5,
        ..GeneratorConfig::default()
    };
    let g = Generator::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
    g.save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h: *mut CaGenerator = ptr::null_mut();
    assert_eq!(unsafe { ca_generator_load(cpath.as_ptr(), &mut h) }, CaStatus::Ok);
    let mut eps = 0.0;
    assert_eq!(unsafe { ca_generator_epsilon(h, &mut eps) }, CaStatus::Ok);
    assert_eq!(eps, 16.0 / 255.0);
    let x = images(2);
    let mut adv = vec![0f32; x.len()];
    let mut delta = vec![0f32; x.len()];
    let st = unsafe {
        ca_generator_generate(
            h,
            x.as_ptr(),
            2,
            3,
            16,
            16,
            [0u32, 4].as_ptr(),
            adv.as_mut_ptr(),
            delta.as_mut_ptr(),
        )
    };
    assert_eq!(st, CaStatus::Ok);
    assert!(delta.iter().all(|d| d.abs() as f64 <= eps + 1e-6));
    let st = unsafe {
        ca_generator_generate(
            h,
            x.as_ptr(),
            2,
            3,
            16,
            16,
            [0u32, 9].as_ptr(),
            adv.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_ne!(st, CaStatus::Ok);
    unsafe { ca_generator_free(h) };
}

#[test]
fn load_errors_and_nulls() {
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut h: *mut CaClassifier = ptr::null_mut();
    assert_eq!(unsafe { ca_classifier_load(missing.as_ptr(), &mut h) }, CaStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("/nonexistent/model.ckpt"));
    assert_eq!(
        unsafe { ca_classifier_load(ptr::null(), &mut h) },
        CaStatus::NullPointer
    );
    unsafe { ca_classifier_free(ptr::null_mut()) };
    unsafe { ca_generator_free(ptr::null_mut()) };
    let v = unsafe { std::ffi::CStr::from_ptr(ca_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn partition_covers_every_class() {
    let (dim, k_classes) = (4, 10);
    let w: Vec<f64> = (0..dim * k_classes).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
    let mut out = [u32::MAX; 10];
    let st = unsafe { ca_partition(w.as_ptr(), dim, k_classes, 3, 5, 0.0, out.as_mut_ptr()) };
    assert_eq!(st, CaStatus::Ok);
    for s in 0..4u32 {
        let n = out.iter().filter(|&&x| x == s).count();
        assert_eq!(n, if s == 3 { 1 } else { 3 });
    }
    let st = unsafe { ca_partition(w.as_ptr(), dim, k_classes, 11, 5, 0.0, out.as_mut_ptr()) };
    assert_eq!(st, CaStatus::InvalidParameter);
}
