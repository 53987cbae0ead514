import json
import struct

import numpy as np
import pytest

from rc3d.serialize import (FormatError, decode_tensor, encode_tensor, load_checkpoint, load_tensor,
                            save_checkpoint, save_tensor)


def test_tensor_record_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = encode_tensor(arr)
    assert buf[:4] == b"RC3D"
    assert struct.unpack_from("<IIII", buf, 4) == (1, 2, 2, 3)
    assert buf[20:] == arr.astype("<f4").tobytes()


def test_tensor_roundtrip(tmp_path, rng):
    for shape in [(), (5,), (2, 3, 4), (1, 2, 3, 4, 5)]:
        arr = rng.standard_normal(shape).astype(np.float32)
        save_tensor(tmp_path / "t.rc3d", arr)
        back = load_tensor(tmp_path / "t.rc3d")
        assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_flow_field_as_tensor(tmp_path, rng):
    flow = rng.standard_normal((2, 8, 9)).astype(np.float32)
    save_tensor(tmp_path / "flow.rc3d", flow)
    assert load_tensor(tmp_path / "flow.rc3d").shape == (2, 8, 9)


def test_corrupt_records_are_rejected(tmp_path):
    buf = encode_tensor(np.ones((2, 2), np.float32))
    with pytest.raises(FormatError, match="magic"):
        decode_tensor(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="version"):
        decode_tensor(buf[:4] + struct.pack("<I", 9) + buf[8:])
    with pytest.raises(FormatError, match="truncated"):
        decode_tensor(buf[:-1])
    (tmp_path / "t.rc3d").write_bytes(buf + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_tensor(tmp_path / "t.rc3d")


def test_checkpoint_roundtrip_and_determinism(tmp_path, rng):
    state = {"b.weight": rng.standard_normal((3, 2)).astype(np.float32),
             "a.bias": rng.standard_normal(3).astype(np.float32)}
    save_checkpoint(tmp_path / "one", state)
    save_checkpoint(tmp_path / "two", dict(reversed(list(state.items()))))
    for name in ("weights.rc3d", "manifest.json"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
    back = load_checkpoint(tmp_path / "one")
    assert set(back) == set(state)
    for k in state:
        assert back[k].tobytes() == state[k].tobytes()
    manifest = json.loads((tmp_path / "one" / "manifest.json").read_text())
    assert [e["name"] for e in manifest["tensors"]] == ["a.bias", "b.weight"]


def test_checkpoint_manifest_mismatch(tmp_path):
    save_checkpoint(tmp_path, {"w": np.ones((2, 2), np.float32)})
    path = tmp_path / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["tensors"][0]["shape"] = [4]
    path.write_text(json.dumps(manifest))
    with pytest.raises(FormatError, match="disagrees"):
        load_checkpoint(tmp_path)
