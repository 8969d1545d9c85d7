# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Tests for complexity."""

import json

from absl.testing import absltest
from absl.testing import parameterized

import attention
import backbones
import complexity
from common import ConfigurationError, Mechanism


def resnet50(attention_value='none'):
    return backbones.build(backbones.resnet50_spec(attention_value), materialize=False)


class FormulaTest(parameterized.TestCase):

    @parameterized.named_parameters(
        ('se', 'se', 64, {}, 512),
        ('cbam', 'cbam', 64, {}, 610),
        ('gc', 'gc', 64, {}, 576),
        ('bam', 'bam', 256, {'k': 3}, 16_912),
        ('triplet', 'triplet', 64, {'k': 7}, 294),
        ('triplet_k3', 'triplet', 2048, {'k': 3}, 54),
    )
    def test_values(self, mechanism, channels, kwargs, expected):
        self.assertEqual(complexity.formula_params(mechanism, channels, **kwargs), expected)

    def test_triplet_is_channel_free(self):
        self.assertEqual(complexity.formula_params('triplet', 64), complexity.formula_params('triplet', 2048))

    @parameterized.named_parameters(
        ('even_kernel', 'cbam', 64, {'k': 4}),
        ('zero_kernel', 'triplet', 64, {'k': 0}),
        ('ratio', 'se', 60, {'r': 16}),
        ('mechanism', 'eca', 64, {}),
    )
    def test_rejects(self, mechanism, channels, kwargs):
        with self.assertRaises(ConfigurationError):
            complexity.formula_params(mechanism, channels, **kwargs)

    @parameterized.named_parameters(
        ('se', Mechanism.SE, 2_514_944, 2_514_944),
        ('cbam', Mechanism.CBAM, 2_516_512, 2_516_544),
        ('bam', Mechanism.BAM, 354_928, 354_928),
        ('gc', Mechanism.GC, 2_530_048, 2_530_048),
        ('triplet', Mechanism.TRIPLET, 4_704, 4_800),
    )
    def test_resnet50_overhead(self, mechanism, conv_only, with_bn):
        self.assertEqual(complexity.resnet50_overhead(mechanism), conv_only)
        self.assertEqual(complexity.resnet50_overhead(mechanism, include_batchnorm=True), with_bn)

    def test_overhead_table(self):
        rows = {row['mechanism']: row for row in complexity.overhead_table()}
        self.assertEqual(sorted(rows), ['bam', 'cbam', 'gc', 'se', 'triplet'])
        self.assertEqual(rows['triplet']['overhead_with_bn'], rows['triplet']['reference'])
        self.assertEqual(rows['triplet']['delta_pct'], 0.0)
        for row in rows.values():
            self.assertLess(abs(row['delta_pct']), 1.5)
        text = complexity.overhead_text(complexity.overhead_table())
        self.assertLen(text.splitlines(), 6)

    def test_triplet_is_orders_cheaper(self):
        triplet = complexity.resnet50_overhead('triplet', include_batchnorm=True)
        for mechanism in ('se', 'cbam', 'gc', 'bam'):
            self.assertLess(50 * triplet, complexity.resnet50_overhead(mechanism))


class ExactCountTest(parameterized.TestCase):

    @parameterized.named_parameters(('k3', 3, 54, 60), ('k5', 5, 150, 156), ('k7', 7, 294, 300))
    def test_triplet_module(self, k, conv_only, with_bn):
        module = attention.TripletAttention(attention.TripletAttentionConfig(k=k))
        self.assertEqual(complexity.attention_params(module), (conv_only, with_bn))

    def test_toy_network_rows(self):
        net = backbones.build(backbones.plain_spec({'type': 'triplet', 'k': 3}))
        report = complexity.exact_count(net)
        self.assertLen(report.rows, 2)
        self.assertEqual([row.channels for row in report.rows], [8, 16])
        for row in report.rows:
            self.assertEqual(row.mechanism, 'triplet')
            self.assertEqual(row.formula_params, 54)
            self.assertEqual(row.exact_params_conv_only, 54)
            self.assertEqual(row.exact_params_with_bn, 60)
            self.assertGreater(row.macs, 0)
        self.assertEqual(report.totals['exact_params_with_bn'], 120)
        self.assertEqual(report.network['total_params'], sum(p.numel() for p in net.parameters()))

    def test_resnet50_triplet_totals(self):
        report = complexity.exact_count(resnet50('triplet'))
        self.assertLen(report.rows, 16)
        self.assertEqual(report.totals['formula_params'], 4_704)
        self.assertEqual(report.totals['exact_params_conv_only'], 4_704)
        self.assertEqual(report.totals['exact_params_with_bn'], 4_800)
        self.assertEqual(report.network['total_params'], 25_557_032 + 4_800)

    def test_resnet50_se_matches_formula(self):
        report = complexity.exact_count(resnet50('se'))
        self.assertEqual(report.totals['exact_params_conv_only'], 2_514_944)
        self.assertEqual(report.totals['exact_params_with_bn'], 2_514_944)
        for row in report.rows:
            self.assertEqual(row.formula_params, row.exact_params_conv_only)

    def test_resnet50_cbam_batchnorm(self):
        report = complexity.exact_count(resnet50('cbam'))
        self.assertEqual(report.totals['exact_params_conv_only'], 2_516_512)
        self.assertEqual(report.totals['exact_params_with_bn'] - report.totals['exact_params_conv_only'], 32)

    def test_serialization(self):
        report = complexity.exact_count(backbones.build(backbones.plain_spec('triplet'), materialize=False))
        data = json.loads(report.to_json())
        self.assertEqual(sorted(data), ['assumptions', 'network', 'rows', 'totals'])
        self.assertEqual(data['assumptions']['k'], 7)
        self.assertEqual(data['network']['input_shape'], [3, 16, 16])
        text = report.to_text()
        self.assertIn('stages.1.0.attention', text)
        self.assertIn('total', text)


class MacsTest(absltest.TestCase):

    def test_single_channel_network(self):
        spec = backbones.ArchSpec('plain', [(1, 1, 1)], 'none', 1, (1, 4, 4))
        net = backbones.build(spec, materialize=False)
        # two 3x3 convs over 16 positions, then the 1x1 head on the pooled vector
        self.assertEqual(complexity.estimate_macs(net), 9 * 16 + 9 * 16 + 1)

    def test_convolutions_quadruple_with_resolution(self):
        net = backbones.build(backbones.plain_spec(), materialize=False)
        head = net.head.in_channels * net.spec.num_classes
        small = complexity.estimate_macs(net, (3, 16, 16)) - head
        large = complexity.estimate_macs(net, (3, 32, 32)) - head
        self.assertEqual(large, 4 * small)

    def test_resnet50(self):
        macs = complexity.estimate_macs(resnet50())
        self.assertLess(abs(macs - 4.12e9) / 4.12e9, 0.02)

    def test_triplet_added_macs(self):
        added = complexity.estimate_macs(resnet50('triplet')) - complexity.estimate_macs(resnet50())
        report = complexity.exact_count(resnet50('triplet'))
        self.assertEqual(added, report.totals['macs'])
        self.assertLess(abs(added - 4.7e7) / 4.7e7, 0.15)
        self.assertLess(added, 0.02 * complexity.estimate_macs(resnet50()))

    def test_macs_grow_with_kernel(self):
        macs = []
        for k in (3, 5, 7):
            spec = backbones.plain_spec({'type': 'triplet', 'k': k})
            macs.append(complexity.exact_count(backbones.build(spec, materialize=False)).totals['macs'])
        self.assertLess(macs[0], macs[1])
        self.assertLess(macs[1], macs[2])

    def test_ablated_triplet_is_cheaper(self):
        def triplet_macs(**overrides):
            spec = backbones.plain_spec(dict(type='triplet', **overrides))
            return complexity.exact_count(backbones.build(spec, materialize=False)).totals['macs']

        full = triplet_macs()
        self.assertLess(triplet_macs(branch_channel_enabled=False), full)
        self.assertLess(triplet_macs(branch_spatial_enabled=False), full)


if __name__ == '__main__':
    absltest.main()
