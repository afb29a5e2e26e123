use std::ffi::{CStr, CString};
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transnet::{checkpoint, Architecture, Tensor, TransNetModel, TransformationSet};
use transnet_ffi::*;

fn saved_model(dir: &std::path::Path) -> (TransNetModel, CString) {
    let arch = Architecture {
        in_channels: 2,
        input_size: 6,
        layers: Architecture::parse_layers("3p,4").unwrap(),
        num_classes: 3,
    };
    let params = arch.init_params(2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let model = TransNetModel::new(params, TransformationSet::parse_list("r0,r1").unwrap()).unwrap();
    let path = dir.join("m.tnet");
    checkpoint::save(&model, &path).unwrap();
    (model, CString::new(path.to_str().unwrap()).unwrap())
}

fn last_error() -> String {
    let p = tnet_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_forward_prune_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(dir.path());
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(tnet_model_load(path.as_ptr(), &mut h), TnetStatus::Ok);
        let (mut heads, mut classes, mut chans, mut params) = (0, 0, 0, 0);
        assert_eq!(
            tnet_model_info(h, &mut heads, &mut classes, &mut chans, &mut params),
            TnetStatus::Ok
        );
        assert_eq!((heads, classes, chans, params), (2, 3, 2, model.count_parameters()));
        assert_eq!(tnet_model_info(h, ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), TnetStatus::Ok);

        let mut name = [0 as std::ffi::c_char; 8];
        assert_eq!(tnet_model_head_transform(h, 1, name.as_mut_ptr(), name.len()), TnetStatus::Ok);
        assert_eq!(CStr::from_ptr(name.as_ptr()).to_str().unwrap(), "r1");
        assert_eq!(tnet_model_head_transform(h, 1, name.as_mut_ptr(), 2), TnetStatus::InvalidArgument);

        let x = Tensor::uniform(&[2, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let mut out = [0.0f64; 3];
        assert_eq!(tnet_model_forward_full(h, x.data().as_ptr(), 2, 6, out.as_mut_ptr(), 3), TnetStatus::Ok);
        assert_eq!(&out[..], model.forward_full(&x).unwrap().data());
        assert_eq!(tnet_model_predict_flip_averaged(h, x.data().as_ptr(), 2, 6, out.as_mut_ptr(), 3), TnetStatus::Ok);
        assert_eq!(&out[..], model.predict_with_flip_averaging(&x).unwrap().data());

        // head 1 on r1(x) equals the compiled pruned head on x
        let mut head1 = [0.0f64; 3];
        assert_eq!(tnet_model_forward_head(h, 1, x.data().as_ptr(), 2, 6, head1.as_mut_ptr(), 3), TnetStatus::Ok);
        let mut p = ptr::null_mut();
        assert_eq!(tnet_model_prune(h, 1, true, &mut p), TnetStatus::Ok);
        let mut pruned = [0.0f64; 3];
        assert_eq!(tnet_model_forward_head(p, 0, x.data().as_ptr(), 2, 6, pruned.as_mut_ptr(), 3), TnetStatus::Ok);
        for (a, b) in head1.iter().zip(&pruned) {
            assert!((a - b).abs() < 1e-12);
        }

        // compiling r2 into the kernels: full(x) on compiled == full(r2 x) on original
        let mut c = ptr::null_mut();
        let r2 = CString::new("r2").unwrap();
        assert_eq!(tnet_model_compile_transformation(h, r2.as_ptr(), &mut c), TnetStatus::Ok);
        let rx = "r2".parse::<transnet::DihedralElement>().unwrap().apply_spatial(&x).unwrap();
        let expect = model.forward_head(0, &rx).unwrap();
        assert_eq!(tnet_model_forward_head(c, 0, x.data().as_ptr(), 2, 6, out.as_mut_ptr(), 3), TnetStatus::Ok);
        for (a, b) in out.iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let json = CString::new(dir.path().join("p.json").to_str().unwrap()).unwrap();
        assert_eq!(tnet_model_save(p, json.as_ptr(), true), TnetStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(tnet_model_load(json.as_ptr(), &mut back), TnetStatus::Ok);
        let mut heads = 0;
        assert_eq!(tnet_model_info(back, &mut heads, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), TnetStatus::Ok);
        assert_eq!(heads, 1);
        tnet_model_free(back);
        tnet_model_free(c);
        tnet_model_free(p);
        tnet_model_free(h);
        tnet_model_free(ptr::null_mut());
    }
}

#[test]
fn error_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = saved_model(dir.path());
    let mut h = ptr::null_mut();
    unsafe {
        let missing = CString::new(dir.path().join("nope.tnet").to_str().unwrap()).unwrap();
        assert_eq!(tnet_model_load(missing.as_ptr(), &mut h), TnetStatus::Io);
        assert!(h.is_null());
        assert!(!last_error().is_empty());

        let junk = dir.path().join("junk.tnet");
        std::fs::write(&junk, b"TNETxxxx").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(tnet_model_load(junk.as_ptr(), &mut h), TnetStatus::Format);

        assert_eq!(tnet_model_load(ptr::null(), &mut h), TnetStatus::NullPointer);
        assert_eq!(tnet_model_load(path.as_ptr(), ptr::null_mut()), TnetStatus::NullPointer);
        assert_eq!(tnet_model_load(path.as_ptr(), &mut h), TnetStatus::Ok);
        assert!(tnet_last_error().is_null());

        let x = vec![0.5; 2 * 5 * 5];
        let mut out = [0.0; 3];
        // 5×5 input: pooling needs even sizes
        let s = tnet_model_forward_full(h, x.as_ptr(), 2, 5, out.as_mut_ptr(), 3);
        assert_ne!(s, TnetStatus::Ok);
        assert_eq!(tnet_model_forward_full(h, x.as_ptr(), 3, 4, out.as_mut_ptr(), 3), TnetStatus::Shape);
        assert_eq!(tnet_model_forward_full(h, x.as_ptr(), 2, 6, out.as_mut_ptr(), 2), TnetStatus::InvalidArgument);
        assert_eq!(tnet_model_forward_head(h, 5, x.as_ptr(), 2, 5, out.as_mut_ptr(), 3), TnetStatus::InvalidArgument);
        assert!(last_error().contains("head"));
        let mut p = ptr::null_mut();
        assert_eq!(tnet_model_prune(h, 9, true, &mut p), TnetStatus::InvalidArgument);
        let bad = CString::new("r7").unwrap();
        assert_eq!(tnet_model_compile_transformation(h, bad.as_ptr(), &mut p), TnetStatus::InvalidArgument);
        tnet_model_free(h);
    }
}

#[test]
fn invariance_score_through_c_api() {
    let mut w = [0.0; 9];
    w[0] = 1.0;
    let (c4, d4) = (CString::new("c4").unwrap(), CString::new("d4").unwrap());
    let (norm, cosine) = (CString::new("norm").unwrap(), CString::new("cosine").unwrap());
    let mut score = 0.0;
    let mut defined = false;
    unsafe {
        assert_eq!(
            tnet_invariance_score(w.as_ptr(), 1, 3, c4.as_ptr(), norm.as_ptr(), false, &mut score, &mut defined),
            TnetStatus::Ok
        );
        assert!(defined);
        assert!((score - 0.75f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            tnet_invariance_score(w.as_ptr(), 1, 3, d4.as_ptr(), norm.as_ptr(), false, &mut score, ptr::null_mut()),
            TnetStatus::Ok
        );
        let zero = [0.0; 9];
        assert_eq!(
            tnet_invariance_score(zero.as_ptr(), 1, 3, c4.as_ptr(), cosine.as_ptr(), false, &mut score, &mut defined),
            TnetStatus::Ok
        );
        assert!(!defined && score.is_nan());
        let bad = CString::new("c8").unwrap();
        assert_eq!(
            tnet_invariance_score(w.as_ptr(), 1, 3, bad.as_ptr(), norm.as_ptr(), false, &mut score, &mut defined),
            TnetStatus::InvalidArgument
        );
        assert_eq!(
            tnet_invariance_score(w.as_ptr(), 0, 3, c4.as_ptr(), norm.as_ptr(), false, &mut score, &mut defined),
            TnetStatus::InvalidArgument
        );
    }
    let v = unsafe { CStr::from_ptr(tnet_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
