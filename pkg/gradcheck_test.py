# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Tests for gradcheck."""

from unittest import mock

from absl.testing import absltest
from absl.testing import parameterized
import torch

import gradcheck
import nn_ops
import tensor_core
from common import VerificationError


class HelpersTest(absltest.TestCase):

    def test_relative_error(self):
        a = torch.tensor([1.0, 2.0], dtype=torch.float64)
        n = torch.tensor([1.0, 2.1], dtype=torch.float64)
        self.assertAlmostEqual(gradcheck.relative_error(a, n), 0.1 / 2.1, places=12)
        self.assertEqual(gradcheck.relative_error(a, a), 0.0)

    def test_relative_error_of_zeros(self):
        zeros = torch.zeros(3, dtype=torch.float64)
        self.assertEqual(gradcheck.relative_error(zeros, zeros), 0.0)
        tiny = torch.full((3,), 1e-12, dtype=torch.float64)
        self.assertAlmostEqual(gradcheck.relative_error(tiny, zeros), 1e-2, places=12)

    def test_separated_values(self):
        values = gradcheck.separated((2, 3, 4, 4), torch.Generator().manual_seed(0)).reshape(-1)
        ordered, _ = torch.sort(values)
        spacing = 2.0 / values.numel()
        self.assertGreater(float((ordered[1:] - ordered[:-1]).min()), 0.7 * spacing)
        self.assertGreater(float(values.abs().min()), 0.1 * spacing)

    def test_every_op_has_a_case(self):
        self.assertEmpty(set(tensor_core.Function.registry) - set(gradcheck.OP_CASES))


class ScopeTest(parameterized.TestCase):

    def test_ops(self):
        results = gradcheck.run_scope('ops', instances=2, seed=0)
        self.assertEqual([r.name for r in results], sorted(tensor_core.Function.registry))
        for r in results:
            self.assertTrue(r.passed, '%s: %.3e' % (r.name, r.max_rel_error))
            self.assertEqual(r.tolerance, 1e-4)
        gradcheck.verify(results)

    @parameterized.parameters(0, 1)
    def test_attention(self, seed):
        results = gradcheck.run_scope('attention', instances=1, seed=seed)
        self.assertLen(results, len(gradcheck.ATTENTION_CASES))
        for r in results:
            self.assertTrue(r.passed, '%s: %.3e' % (r.name, r.max_rel_error))

    def test_attention_twenty_instances(self):
        results = gradcheck.run_scope('attention', instances=20, seed=0)
        self.assertEqual(sorted(r.name for r in results), sorted(gradcheck.ATTENTION_CASES))
        for r in results:
            self.assertEqual(r.instances, 20)
            self.assertTrue(r.passed, '%s: %.3e' % (r.name, r.max_rel_error))

    def test_end2end(self):
        results = gradcheck.run(['end2end'], instances=1, seed=0)
        self.assertLen(results, 1)
        self.assertTrue(results[0].passed, '%.3e' % results[0].max_rel_error)
        self.assertEqual(results[0].tolerance, 1e-3)

    def test_faulty_backward_is_caught(self):
        original = nn_ops.SigmoidFunction.backward

        def doubled(ctx, grad):
            return tuple(2.0 * g for g in original(ctx, grad))

        with mock.patch.object(nn_ops.SigmoidFunction, 'backward', staticmethod(doubled)):
            results = gradcheck.run_scope('ops', instances=1, names=['sigmoid', 'relu'])
        by_name = {r.name: r for r in results}
        self.assertFalse(by_name['sigmoid'].passed)
        self.assertGreater(by_name['sigmoid'].max_rel_error, 0.1)
        self.assertTrue(by_name['relu'].passed)
        with self.assertRaisesRegex(VerificationError, 'sigmoid'):
            gradcheck.verify(results)

    def test_missing_case_fails(self):
        results = gradcheck.run_scope('ops', instances=1, names=['softmax'])
        self.assertFalse(results[0].passed)
        self.assertEqual(results[0].instances, 0)

    def test_report_text(self):
        results = gradcheck.run_scope('ops', instances=1, names=['add', 'sum'])
        text = gradcheck.report_text(results)
        self.assertLen(text.splitlines(), 3)
        self.assertIn('pass', text)


if __name__ == '__main__':
    absltest.main()
