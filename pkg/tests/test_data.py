import warnings

import numpy as np
import pytest

from amsnet.errors import ConfigError, InputError
from amsnet.harness.data import (SyntheticDomainSpec, augment, export_datasets, generate_domains,
                                 leave_one_out, load_datasets, make_prototype, merge_domains,
                                 pk_sample, random_domain_specs, render, warn_replaced)


@pytest.fixture(scope="module")
def domains():
    return generate_domains(3, 5, 4, seed=3)


def test_identity_style_renders_prototype_exactly(rng):
    proto = make_prototype(rng)
    assert np.array_equal(render(proto, SyntheticDomainSpec.identity()), proto.image)


def test_style_is_a_per_channel_affine_map(rng):
    spec = SyntheticDomainSpec(1, illumination=1.4, contrast=0.7, color_gains=(0.6, 1.0, 1.3),
                               noise_std=0.01)
    scale, offset = spec.affine()
    for _ in range(5):
        proto = make_prototype(rng)
        img = render(proto, spec, rng)
        for c in range(3):
            x, y = proto.image[c].ravel(), img[c].ravel()
            slope, icept = np.polyfit(x, y, 1)
            r2 = 1 - np.sum((y - (slope * x + icept)) ** 2) / np.sum((y - y.mean()) ** 2)
            assert r2 > 0.9
            assert abs(slope - scale[c]) < 0.05 and abs(icept - offset[c]) < 0.05


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticDomainSpec(0, illumination=0)
    with pytest.raises(ConfigError):
        SyntheticDomainSpec(0, noise_std=-1)


def test_duplicate_styles_rejected():
    s = SyntheticDomainSpec(0, illumination=1.2)
    with pytest.raises(ConfigError, match="identical styles"):
        generate_domains(2, 2, 2, specs=[s, SyntheticDomainSpec(1, illumination=1.2)])
    with pytest.raises(ConfigError):
        generate_domains(1, 2, 2)


def test_generation_is_deterministic(domains):
    again = generate_domains(3, 5, 4, seed=3)
    for a, b in zip(domains, again):
        assert np.array_equal(a.images, b.images) and np.array_equal(a.ids, b.ids)
    other = generate_domains(3, 5, 4, seed=4)
    assert not np.array_equal(domains[0].images, other[0].images)


def test_shapes_and_labels(domains):
    for k, d in enumerate(domains):
        assert d.images.shape == (20, 3, 32, 16)
        assert d.domain == k and d.num_ids == 5 and len(d) == 20
        assert np.bincount(d.ids).tolist() == [4] * 5


def test_domains_differ_in_style():
    specs = random_domain_specs(4, seed=0)
    assert len({s.style_key() for s in specs}) == 4


def test_leave_one_out(domains):
    train, test = leave_one_out(domains, 1)
    assert [d.domain for d in train] == [0, 2] and test.domain == 1
    with pytest.raises(InputError):
        leave_one_out(domains, 9)


def test_merge_offsets_labels(domains):
    images, labels, dom = merge_domains(domains[:2])
    assert images.shape[0] == 40
    assert labels.tolist() == domains[0].ids.tolist() + (domains[1].ids + 5).tolist()
    assert dom.tolist() == [0] * 20 + [1] * 20


def test_pk_sample_counts(rng):
    labels = np.repeat(np.arange(6), 5)
    idx, replaced = pk_sample(labels, 4, 3, rng)
    assert not replaced and len(idx) == 12
    counts = np.bincount(labels[idx], minlength=6)
    assert sorted(counts[counts > 0].tolist()) == [3] * 4
    for block in idx.reshape(4, 3):
        assert len(set(block.tolist())) == 3


def test_pk_sample_with_replacement(rng):
    labels = np.array([0, 0, 1, 1, 1, 1])
    _, replaced = pk_sample(labels, 2, 4, rng)
    assert replaced
    with pytest.warns(UserWarning):
        warn_replaced(True)
    with pytest.raises(InputError):
        pk_sample(labels, 3, 2, rng)
    with pytest.raises(InputError):
        pk_sample(np.array([0, 1, 1]), 2, 2, rng)


def test_augment_preserves_shape_and_is_seeded(domains):
    batch = domains[0].images[:6]
    a = augment(batch, np.random.default_rng(1))
    b = augment(batch, np.random.default_rng(1))
    assert a.shape == batch.shape and np.array_equal(a, b)
    assert np.array_equal(augment(batch, np.random.default_rng(1), False, False, False), batch)


def test_export_round_trip(domains, tmp_path):
    path = export_datasets(domains, tmp_path)
    assert path.endswith("manifest.json")
    back = load_datasets(tmp_path)
    for a, b in zip(domains, back):
        assert np.array_equal(a.images, b.images) and a.images.dtype == b.images.dtype
        assert np.array_equal(a.ids, b.ids)
        assert a.spec == b.spec and a.domain == b.domain
