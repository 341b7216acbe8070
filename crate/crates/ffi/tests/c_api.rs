use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use partfuse::config::RunConfig;
use partfuse::dataset::{Corpus, CorpusSpec};
use partfuse::mask::Part;
use partfuse::model::Model;
use partfuse_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pf_last_error()).to_string_lossy().into_owned() }
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn image(h: usize, w: usize, f: impl Fn(usize) -> u8) -> *mut PfImage {
    let bytes: Vec<u8> = (0..h * w * 3).map(f).collect();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { pf_image_from_rgb8(h, w, bytes.as_ptr(), &mut out) }, PfStatus::Ok);
    out
}

fn mask(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> *mut PfMask {
    let cells: Vec<u8> = (0..h * w).map(|i| f(i / w, i % w) as u8).collect();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { pf_mask_from_cells(h, w, cells.as_ptr(), &mut out) }, PfStatus::Ok);
    out
}

#[test]
fn mse_and_fpsim_values() {
    let a = image(4, 4, |_| 0);
    let b = image(4, 4, |i| if i % 3 == 0 { 51 } else { 0 });
    let m = mask(4, 4, |r, _| r < 2);
    let mut v = f64::NAN;
    unsafe {
        assert_eq!(pf_mse(a, b, ptr::null(), &mut v), PfStatus::Ok);
        // red channel differs by 0.2 everywhere: 0.04 / 3 channels
        assert!((v - 0.04 / 3.0).abs() < 1e-9, "{v}");
        assert_eq!(pf_mse(a, a, m, &mut v), PfStatus::Ok);
        assert_eq!(v, 0.0);
        let g = image(4, 4, |i| (i * 37 % 251) as u8);
        assert_eq!(pf_fpsim(g, m, g, m, &mut v), PfStatus::Ok);
        assert!((v - 1.0).abs() < 1e-9);
        pf_image_free(g);
        pf_image_free(a);
        pf_image_free(b);
        pf_mask_free(m);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut v = 0.0;
    let a = image(4, 4, |_| 0);
    let b = image(2, 2, |_| 0);
    unsafe {
        assert_eq!(pf_mse(a, ptr::null(), ptr::null(), &mut v), PfStatus::NullPointer);
        assert!(last_error().contains("null pointer"));
        assert_eq!(pf_mse(a, b, ptr::null(), &mut v), PfStatus::Data);
        assert!(last_error().contains("dimension"), "{}", last_error());
        let empty = mask(4, 4, |_, _| false);
        assert_eq!(pf_fpsim(a, empty, a, empty, &mut v), PfStatus::Data);
        assert_eq!(pf_mse(a, a, ptr::null(), &mut v), PfStatus::Ok);
        assert_eq!(last_error(), "");

        let mut out = ptr::null_mut();
        let bad = [0u8, 2, 1, 0];
        assert_eq!(pf_mask_from_cells(2, 2, bad.as_ptr(), &mut out), PfStatus::Data);
        assert!(out.is_null());
        let missing = CString::new("/nonexistent/model.fapw").unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(pf_model_load(missing.as_ptr(), &mut model), PfStatus::Data);
        assert!(model.is_null());
        pf_mask_free(empty);
        pf_image_free(a);
        pf_image_free(b);
        pf_model_free(ptr::null_mut());
    }
}

#[test]
fn image_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let img = image(3, 5, |i| (i * 11) as u8);
    let path = cstr(&dir.path().join("a.ppm"));
    unsafe {
        assert_eq!(pf_image_write(img, path.as_ptr()), PfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(pf_image_read(path.as_ptr(), &mut back), PfStatus::Ok);
        let (mut h, mut w) = (0, 0);
        assert_eq!(pf_image_dims(back, &mut h, &mut w), PfStatus::Ok);
        assert_eq!((h, w), (3, 5));
        let mut buf = vec![0u8; 45];
        assert_eq!(pf_image_rgb8(back, buf.as_mut_ptr(), buf.len()), PfStatus::Ok);
        assert_eq!(buf, (0..45).map(|i| (i * 11) as u8).collect::<Vec<_>>());
        assert_eq!(pf_image_rgb8(back, buf.as_mut_ptr(), 10), PfStatus::Data);
        pf_image_free(back);
        pf_image_free(img);
    }
}

#[test]
fn swap_matches_the_library() {
    let run = RunConfig::parse(
        "data.size = 32\nencoder.patch = 2\nencoder.dim = 8\nfusion.dim = 8\nunet.base = 8\nunet.mult = 1,2\n\
         unet.attn_levels = 1\nunet.groups = 2\nunet.time_dim = 8\nddim.steps = 3\n",
    )
    .unwrap();
    let model = Model::new(&run).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.fapw");
    model.save(&ck, false).unwrap();
    let corpus = Corpus::generate(&CorpusSpec { identities: 2, views: 1, size: 32, ..Default::default() }).unwrap();
    let (t, s) = (&corpus.samples[0], &corpus.samples[1]);

    let to_handle = |img: &partfuse::image::Image| image(32, 32, |i| img.to_rgb8()[i]);
    let to_mask = |m: &partfuse::mask::Mask| mask(32, 32, |r, c| m.get(r, c));
    unsafe {
        let mut pm = ptr::null_mut();
        assert_eq!(pf_model_load(cstr(&ck).as_ptr(), &mut pm), PfStatus::Ok);
        let mut side = 0;
        assert_eq!(pf_model_image_size(pm, &mut side), PfStatus::Ok);
        assert_eq!(side, 32);
        let target = to_handle(&t.image);
        let source = to_handle(&s.image);
        let tm: Vec<*mut PfMask> = Part::SWAPPABLE.iter().map(|&p| to_mask(t.masks.get(p))).collect();
        let sm: Vec<*mut PfMask> = Part::SWAPPABLE.iter().map(|&p| to_mask(s.masks.get(p))).collect();
        let tm_c: Vec<*const PfMask> = tm.iter().map(|&p| p as *const _).collect();
        let sm_c: Vec<*const PfMask> = sm.iter().map(|&p| p as *const _).collect();
        let srcs: [*const PfImage; 3] = [ptr::null(), ptr::null(), source];
        let mut out = ptr::null_mut();
        assert_eq!(pf_swap(pm, target, tm_c.as_ptr(), srcs.as_ptr(), sm_c.as_ptr(), 9, 0, &mut out), PfStatus::Ok, "{}", last_error());
        let mut buf = vec![0u8; 32 * 32 * 3];
        assert_eq!(pf_image_rgb8(out, buf.as_mut_ptr(), buf.len()), PfStatus::Ok);

        let mut spec = partfuse::fusion::SwapSpec::none();
        let quant = |img: &partfuse::image::Image| partfuse::image::Image::from_rgb8(32, 32, &img.to_rgb8()).unwrap();
        spec.set(Part::Mouth, partfuse::fusion::PartSource { image: quant(&s.image), mask: s.masks.get(Part::Mouth).clone() }).unwrap();
        let mut ddim = partfuse::model::ddim_config(&model.run).unwrap();
        ddim.seed = 9;
        let direct = partfuse::pipeline::swap(&model, &quant(&t.image), &t.masks, &spec, &ddim).unwrap();
        assert_eq!(buf, direct.image.to_rgb8());

        let mut none = ptr::null_mut();
        assert_eq!(pf_swap(pm, target, ptr::null(), srcs.as_ptr(), sm_c.as_ptr(), 9, 0, &mut none), PfStatus::NullPointer);
        assert!(none.is_null());

        pf_image_free(out);
        for m in tm.into_iter().chain(sm) {
            pf_mask_free(m);
        }
        pf_image_free(target);
        pf_image_free(source);
        pf_model_free(pm);
    }
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/partfuse.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["pf_swap", "pf_fpsim", "pf_mse", "pf_last_error", "pf_model_load", "PF_STATUS_NULL_POINTER"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"partfuse.h\"\nint main(void) { PfModel *m = 0; PfStatus s = pf_model_load(\"x\", &m); pf_model_free(m); return s == PF_STATUS_OK; }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match std::process::Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(e) => eprintln!("skipping C compile check: {cc} unavailable ({e})"),
    }
}
