"""pytest wiring for absltest-based test modules.

absltest reads flags such as --test_tmpdir, which are only parsed when a test
module runs through absltest.main(). Under pytest, mark them parsed so the
defaults apply.
"""

from absl import flags


def pytest_configure(config):
    del config
    if not flags.FLAGS.is_parsed():
        flags.FLAGS.mark_as_parsed()
