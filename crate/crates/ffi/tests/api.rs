use std::ffi::{c_char, c_int, CStr, CString};
use std::ptr;

use seqclr::data::Charset;
use seqclr::decoders::{init_decoder, DecoderConfig};
use seqclr::encoder::EncoderConfig;
use seqclr::training::Checkpoint;
use seqclr_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(seqclr_last_error()) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(seqclr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn edit_distance_and_errors() {
    let mut d = 0usize;
    let rc = unsafe { seqclr_edit_distance(cstr("kitten").as_ptr(), cstr("sitting").as_ptr(), &mut d) };
    assert_eq!((rc, d), (SEQCLR_OK, 3));
    assert_eq!(last_error(), "");

    let rc = unsafe { seqclr_edit_distance(ptr::null(), cstr("x").as_ptr(), &mut d) };
    assert_eq!(rc, SEQCLR_ERR_NULL);
    assert!(last_error().contains("null"));

    let bad = [0xffu8, 0xfe, 0];
    let rc = unsafe { seqclr_edit_distance(bad.as_ptr().cast(), cstr("x").as_ptr(), &mut d) };
    assert_eq!(rc, SEQCLR_ERR_ARGUMENT);
}

#[test]
fn ctc_loss_two_frame_example() {
    // uniform over {a, blank}; target "a" has three paths
    let logp = [0.5f64.ln(); 4];
    let mut out = 0.0;
    let rc = unsafe { seqclr_ctc_loss(logp.as_ptr(), 2, 2, [0usize].as_ptr(), 1, 1, &mut out) };
    assert_eq!(rc, SEQCLR_OK);
    assert!((out + 0.75f64.ln()).abs() < 1e-12);

    let rc = unsafe { seqclr_ctc_loss(logp.as_ptr(), 2, 2, [0usize, 0, 0].as_ptr(), 3, 1, &mut out) };
    assert_eq!(rc, SEQCLR_OK);
    assert_eq!(out, f64::INFINITY);

    let rc = unsafe { seqclr_ctc_loss(logp.as_ptr(), 2, 2, [1usize].as_ptr(), 1, 1, &mut out) };
    assert_eq!(rc, SEQCLR_ERR_ARGUMENT);
    let rc = unsafe { seqclr_ctc_loss(logp.as_ptr(), 2, 2, ptr::null(), 0, 5, &mut out) };
    assert_eq!(rc, SEQCLR_ERR_ARGUMENT);
}

#[test]
fn contrastive_loss_two_by_two() {
    let z = [1.0, 0.0, 0.0, 1.0];
    let mut out = 0.0;
    let rc = unsafe { seqclr_contrastive_loss(z.as_ptr(), z.as_ptr(), 2, 2, 1.0, &mut out) };
    assert_eq!(rc, SEQCLR_OK);
    let want = 4.0 * ((2.0 + std::f64::consts::E).ln() - 1.0);
    assert!((out - want).abs() < 1e-12);

    let rc = unsafe { seqclr_contrastive_loss(z.as_ptr(), z.as_ptr(), 2, 2, 0.0, &mut out) };
    assert_eq!(rc, SEQCLR_ERR_ARGUMENT);
    assert!(last_error().contains("temperature"));
}

fn with_decoder(dir: &std::path::Path) -> std::path::PathBuf {
    let enc = EncoderConfig::desk();
    let mut ck = Checkpoint::untrained(&enc, 3).unwrap();
    let charset = Charset::new("ab".chars()).unwrap();
    let dec = DecoderConfig::Ctc;
    init_decoder(&mut ck.params, &dec, enc.output_dim(), charset.len(), 3);
    ck.decoder = Some(dec);
    ck.charset = Some(charset);
    let path = dir.join("model.ckpt");
    ck.save(&path).unwrap();
    path
}

#[test]
fn checkpoint_handles() {
    let dir = tempfile::tempdir().unwrap();
    let plain = dir.path().join("plain.ckpt");
    let ck = Checkpoint::untrained(&EncoderConfig::desk(), 1).unwrap();
    ck.save(&plain).unwrap();

    let mut h: *mut SeqclrCheckpoint = ptr::null_mut();
    let path = cstr(plain.to_str().unwrap());
    assert_eq!(unsafe { seqclr_checkpoint_load(path.as_ptr(), &mut h) }, SEQCLR_OK);
    assert!(!h.is_null());

    let mut it = 99u64;
    assert_eq!(unsafe { seqclr_checkpoint_iteration(h, &mut it) }, SEQCLR_OK);
    assert_eq!(it, 0);
    let mut has: c_int = 7;
    assert_eq!(unsafe { seqclr_checkpoint_has_decoder(h, &mut has) }, SEQCLR_OK);
    assert_eq!(has, 0);

    let mut buf = [0 as c_char; 65];
    let mut len = 0usize;
    assert_eq!(
        unsafe { seqclr_checkpoint_encoder_digest(h, buf.as_mut_ptr(), buf.len(), &mut len) },
        SEQCLR_OK
    );
    let digest = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!((len, digest.as_str()), (64, ck.encoder_digest().as_str()));
    assert_eq!(
        unsafe { seqclr_checkpoint_encoder_digest(h, buf.as_mut_ptr(), 10, &mut len) },
        SEQCLR_ERR_BUFFER_TOO_SMALL
    );
    assert_eq!(len, 64);

    let px = vec![0.5; 32 * 80];
    let rc = unsafe { seqclr_recognize(h, px.as_ptr(), 32, 80, buf.as_mut_ptr(), buf.len(), &mut len) };
    assert_eq!(rc, SEQCLR_ERR_INCOMPATIBLE);
    unsafe { seqclr_checkpoint_free(h) };
    unsafe { seqclr_checkpoint_free(ptr::null_mut()) };

    let missing = cstr(dir.path().join("nope.ckpt").to_str().unwrap());
    let mut h2: *mut SeqclrCheckpoint = 1 as *mut _;
    assert_eq!(unsafe { seqclr_checkpoint_load(missing.as_ptr(), &mut h2) }, SEQCLR_ERR_IO);
    assert!(h2.is_null());

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"garbage").unwrap();
    let junk = cstr(junk.to_str().unwrap());
    assert_eq!(unsafe { seqclr_checkpoint_load(junk.as_ptr(), &mut h2) }, SEQCLR_ERR_INCOMPATIBLE);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { seqclr_checkpoint_iteration(ptr::null(), &mut it) }, SEQCLR_ERR_NULL);
}

#[test]
fn recognize_with_a_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(with_decoder(dir.path()).to_str().unwrap());
    let mut h: *mut SeqclrCheckpoint = ptr::null_mut();
    assert_eq!(unsafe { seqclr_checkpoint_load(path.as_ptr(), &mut h) }, SEQCLR_OK);
    let mut has: c_int = 0;
    unsafe { seqclr_checkpoint_has_decoder(h, &mut has) };
    assert_eq!(has, 1);

    let px: Vec<f64> = (0..40 * 120).map(|i| ((i * 7) % 13) as f64 / 12.0).collect();
    let mut buf = [0 as c_char; 64];
    let mut len = 0usize;
    let rc = unsafe { seqclr_recognize(h, px.as_ptr(), 40, 120, buf.as_mut_ptr(), buf.len(), &mut len) };
    assert_eq!(rc, SEQCLR_OK, "{}", last_error());
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(text.len(), len);
    assert!(text.chars().all(|c| c == 'a' || c == 'b'), "{text}");

    let mut again = [0 as c_char; 64];
    unsafe { seqclr_recognize(h, px.as_ptr(), 40, 120, again.as_mut_ptr(), again.len(), ptr::null_mut()) };
    assert_eq!(buf, again);

    let bad = vec![2.0; 4];
    let rc = unsafe { seqclr_recognize(h, bad.as_ptr(), 2, 2, buf.as_mut_ptr(), buf.len(), &mut len) };
    assert_eq!(rc, SEQCLR_ERR_ARGUMENT);
    unsafe { seqclr_checkpoint_free(h) };
}
