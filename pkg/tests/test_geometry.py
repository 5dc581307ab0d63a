import math

import numpy as np
import pytest

from rigcal import geometry as g


def pinhole(f=100.0, k=(0.0, 0.0), size=200):
    return g.CameraModel(g.CameraKind.PINHOLE_RADIAL, f, 0.0, 0.0, k, size, size)


def fisheye(f=100.0, k=(0.0, 0.0), size=200):
    return g.CameraModel(g.CameraKind.FISHEYE_RADIAL, f, 0.0, 0.0, k, size, size)


class TestProject:
    def test_optical_axis(self):
        cam = pinhole()
        pix = g.project(cam, g.ViewPose.identity(), np.array([0.0, 0.0, 1.0]))
        assert np.allclose(pix, [0.0, 0.0])

    def test_radial_distortion_arithmetic(self):
        cam = pinhole(k=(0.1, 0.0))
        pix = g.project(cam, g.ViewPose.identity(), np.array([1.0, 0.0, 1.0]))
        # r^2 = 1, factor 1.1, f = 100
        assert np.allclose(pix, [110.0, 0.0])

    def test_equidistant_fisheye(self):
        cam = fisheye()
        pix = g.project(cam, g.ViewPose.identity(), np.array([1.0, 0.0, 1.0]))
        assert np.allclose(pix, [100.0 * math.pi / 4.0, 0.0], atol=1e-12)

    def test_behind_camera(self):
        with pytest.raises(g.BehindCamera):
            g.project(pinhole(), g.ViewPose.identity(), np.array([0.0, 0.0, -1.0]))

    def test_fisheye_behind_cap(self):
        cam = fisheye()
        # theta slightly past the 95 degree cap
        theta = math.radians(96.0)
        p = np.array([math.sin(theta), 0.0, math.cos(theta)])
        with pytest.raises(g.BehindCamera):
            g.project(cam, g.ViewPose.identity(), p)
        theta = math.radians(94.0)
        p = np.array([math.sin(theta), 0.0, math.cos(theta)])
        g.project(cam, g.ViewPose.identity(), p)  # inside the cap

    def test_non_monotonic_distortion_out_of_domain(self):
        cam = pinhole(k=(-0.5, 0.0))
        # monotonicity of r(1 + k1 r^2) fails at r^2 = 1/(3*0.5)
        with pytest.raises(g.OutOfDomain):
            g.project(cam, g.ViewPose.identity(), np.array([1.5, 0.0, 1.0]))

    def test_fisheye_center_maps_to_principal_point(self):
        cam = fisheye(k=(-0.1, 0.02))
        pix = g.project(cam, g.ViewPose.identity(), np.array([0.0, 0.0, 5.0]))
        assert np.allclose(pix, [0.0, 0.0])

    def test_rigid_invariance(self):
        # project(pose o gg, gg^-1(x)) == project(pose, x)
        rng = np.random.default_rng(11)
        cam = pinhole(k=(-0.1, 0.02))
        for _ in range(50):
            pose = g.ViewPose(g.quat_exp(rng.normal(size=3) * 0.3), rng.normal(size=3) * 0.2)
            gg = g.ViewPose(g.quat_exp(rng.normal(size=3)), rng.normal(size=3))
            x = rng.normal(size=3) * [0.4, 0.4, 0.2] + [0, 0, 3.0]
            a = g.project(cam, pose, x)
            b = g.project(cam, pose.compose(gg), gg.inverse().transform(x))
            assert np.allclose(a, b, atol=1e-10)


class TestUnproject:
    def test_principal_point_is_axis(self):
        for cam in (pinhole(k=(0.05, -0.01)), fisheye(k=(-0.03, 0.004))):
            b = g.unproject(cam, np.array([0.0, 0.0]))
            assert np.allclose(b, [0.0, 0.0, 1.0])

    def test_known_inverse_by_bisection_oracle(self):
        # pixel (110, 0) with f=100, k1=0.1 must invert the cubic
        # r (1 + 0.1 r^2) = 1.1; solve independently by bisection
        def fwd(r):
            return r * (1.0 + 0.1 * r * r)

        lo, hi = 0.0, 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if fwd(mid) < 1.1:
                lo = mid
            else:
                hi = mid
        r_oracle = 0.5 * (lo + hi)
        assert abs(r_oracle - 1.0) < 1e-12  # sanity: the root is exactly 1

        cam = pinhole(k=(0.1, 0.0))
        b = g.unproject(cam, np.array([110.0, 0.0]))
        expected = np.array([r_oracle, 0.0, 1.0])
        expected /= np.linalg.norm(expected)
        assert np.allclose(b, expected, atol=1e-12)

    @pytest.mark.parametrize("kind,k", [
        (g.CameraKind.PINHOLE_RADIAL, (0.1, -0.02)),
        (g.CameraKind.PINHOLE_RADIAL, (-0.15, 0.05)),
        (g.CameraKind.FISHEYE_RADIAL, (-0.03, 0.004)),
        (g.CameraKind.FISHEYE_FULL, (-0.03, 0.004, 2e-4, -1e-5)),
    ])
    def test_round_trip_1000_points(self, kind, k):
        rng = np.random.default_rng(3)
        cam = g.CameraModel(kind, 100.0, 0.0, 0.0, k, 200, 200)
        pose = g.ViewPose(g.quat_exp(rng.normal(size=3) * 0.1), rng.normal(size=3) * 0.1)
        pts = rng.normal(size=(1000, 3)) * [0.5, 0.5, 0.3] + [0, 0, 3.0]
        pix, status = g.project_points(cam, pose, pts)
        ok = status == g.OK
        bearings, conv = g.unproject_points(cam, pix[ok])
        assert conv.all()
        xc = pose.transform(pts[ok])
        xc /= np.linalg.norm(xc, axis=1, keepdims=True)
        # angular deviation via the cross product (sin of the angle)
        dev = np.linalg.norm(np.cross(bearings, xc), axis=1)
        assert dev.max() < 1e-10

    def test_no_converge_reported(self):
        cam = pinhole(k=(-0.3, 0.0))
        # far outside the monotone range of the inverse polynomial
        with pytest.raises(g.NoConverge):
            g.unproject(cam, np.array([199.0, 0.0]))


class TestTriangulate:
    def make_obs(self, point, poses, cam):
        obs = []
        for pose in poses:
            pix = g.project(cam, pose, point)
            obs.append((cam, pose, pix))
        return obs

    def test_exact_two_views(self):
        cam = pinhole(k=(0.02, -0.005))
        point = np.array([0.3, -0.2, 4.0])
        poses = [g.ViewPose.identity(),
                 g.ViewPose(g.quat_exp([0.0, 0.2, 0.0]), np.array([-0.8, 0.0, 0.1]))]
        x = g.triangulate_dlt(self.make_obs(point, poses, cam))
        assert np.linalg.norm(x - point) < 1e-8

    def test_pure_rotation_degenerate(self):
        cam = pinhole()
        point = np.array([0.3, -0.2, 4.0])
        poses = [g.ViewPose.identity(), g.ViewPose(g.quat_exp([0.0, 0.1, 0.0]), np.zeros(3))]
        with pytest.raises(g.DegenerateGeometry):
            g.triangulate_dlt(self.make_obs(point, poses, cam))

    def test_noisy_multiview_beats_worst_pair(self):
        # 4 noisy views: error below the worst over all 2-view subsets,
        # established by brute-force enumeration of every pair
        rng = np.random.default_rng(5)
        cam = pinhole(f=300.0)
        point = np.array([0.2, 0.1, 5.0])
        poses = [g.ViewPose(g.quat_exp([0.0, 0.25 * (k - 1.5), 0.0]),
                            np.array([0.9 * (k - 1.5), 0.05 * k, 0.0]))
                 for k in range(4)]
        worse = 0
        trials = 30
        for _ in range(trials):
            obs = []
            for pose in poses:
                pix = g.project(cam, pose, point) + rng.normal(0, 0.5, 2)
                obs.append((cam, pose, pix))
            err_all = np.linalg.norm(g.triangulate_dlt(obs) - point)
            pair_errs = []
            for a in range(4):
                for b in range(a + 1, 4):
                    try:
                        pair_errs.append(np.linalg.norm(
                            g.triangulate_dlt([obs[a], obs[b]]) - point))
                    except g.DegenerateGeometry:
                        pair_errs.append(np.inf)
            if err_all > max(pair_errs):
                worse += 1
        assert worse == 0

    def test_need_two_observations(self):
        cam = pinhole()
        with pytest.raises(ValueError):
            g.triangulate_dlt([(cam, g.ViewPose.identity(), np.zeros(2))])


class TestTriangulationAngle:
    def pose_at(self, center):
        return g.ViewPose(np.array([1.0, 0, 0, 0]), -np.asarray(center, dtype=float))

    def test_symmetric_geometry(self):
        pi = self.pose_at([1.0, 0.0, 0.0])
        pj = self.pose_at([-1.0, 0.0, 0.0])
        ang = g.triangulation_angle(pi, pj, np.array([0.0, 0.0, 1.0]))
        assert abs(ang - math.pi / 2) < 1e-12

    def test_identical_centers_degenerate(self):
        p = self.pose_at([1.0, 2.0, 3.0])
        with pytest.raises(g.DegenerateGeometry):
            g.triangulation_angle(p, p, np.array([1.0, 2.0, 3.0]))

    def test_matches_extended_precision_oracle(self):
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 50
        rng = np.random.default_rng(7)
        for _ in range(25):
            ci = rng.normal(size=3)
            cj = rng.normal(size=3)
            x = rng.normal(size=3) * 2.0
            ang = g.triangulation_angle(self.pose_at(ci), self.pose_at(cj), x)
            ri = [mp.mpf(float(v)) for v in ci - x]
            rj = [mp.mpf(float(v)) for v in cj - x]
            dot = sum(a * b for a, b in zip(ri, rj))
            ni = mp.sqrt(sum(a * a for a in ri))
            nj = mp.sqrt(sum(b * b for b in rj))
            oracle = float(mp.acos(dot / (ni * nj)))
            assert abs(ang - oracle) < 1e-12

    def test_bitwise_symmetry(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            pi = g.ViewPose(g.quat_exp(rng.normal(size=3)), rng.normal(size=3))
            pj = g.ViewPose(g.quat_exp(rng.normal(size=3)), rng.normal(size=3))
            x = rng.normal(size=3)
            a = g.triangulation_angle(pi, pj, x)
            b = g.triangulation_angle(pj, pi, x)
            assert a == b  # bit-for-bit


class TestEpipolar:
    def two_view_setup(self, rng, n=50):
        cam = pinhole(f=120.0)
        pose_i = g.ViewPose.identity()
        R = g.quat_to_matrix(g.quat_exp([0.05, 0.4, 0.02]))
        t = np.array([-1.0, 0.1, 0.15])
        t /= np.linalg.norm(t)
        pose_j = g.ViewPose.from_matrix(R, t)
        pts = rng.normal(size=(n, 3)) * [0.8, 0.8, 0.5] + [0, 0, 4.0]
        E = g.skew(t) @ R
        E /= np.linalg.norm(E)
        return cam, pose_i, pose_j, pts, E, R, t

    def test_essential_identity_intrinsics(self):
        rng = np.random.default_rng(2)
        F = rng.normal(size=(3, 3))
        F = g.enforce_rank2(F)
        pair = g.EpipolarPair(F=F, match_count=10)
        E = g.essential_from_fundamental(pair, np.eye(3), np.eye(3))
        assert np.allclose(E, F / np.linalg.norm(F))
        assert abs(np.linalg.norm(E) - 1.0) < 1e-15

    def test_singular_values_of_true_essential(self):
        rng = np.random.default_rng(4)
        cam, _, _, _, E, R, t = self.two_view_setup(rng)
        # convert through F and back; singular values must be (s, s, 0)
        K = cam.K
        F = np.linalg.inv(K).T @ E @ np.linalg.inv(K)
        pair = g.EpipolarPair(F=F, match_count=1)
        E2 = g.essential_from_fundamental(pair, K, K)
        s = np.linalg.svd(E2, compute_uv=False)
        assert abs(s[0] - 1 / math.sqrt(2)) < 1e-10
        assert abs(s[1] - 1 / math.sqrt(2)) < 1e-10
        assert s[2] < 1e-10

    def test_matches_matrix_product_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            F = g.enforce_rank2(rng.normal(size=(3, 3)))
            fi, fj = rng.uniform(50, 500, 2)
            Ki = g.calibration_matrix(fi, 10.0, -5.0)
            Kj = g.calibration_matrix(fj, -3.0, 7.0)
            E = g.essential_from_fundamental(g.EpipolarPair(F=F, match_count=1), Ki, Kj)
            # independent element-wise triple product
            raw = np.zeros((3, 3))
            for a in range(3):
                for b in range(3):
                    acc = 0.0
                    for p in range(3):
                        for q in range(3):
                            acc += Kj[p, a] * F[p, q] * Ki[q, b]
                    raw[a, b] = acc
            raw /= math.sqrt(sum(raw.reshape(-1) ** 2))
            assert np.allclose(E, raw, atol=1e-12)

    def test_decompose_recovers_pose(self):
        rng = np.random.default_rng(8)
        cam, pose_i, pose_j, pts, E, R, t = self.two_view_setup(rng)
        bi = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        xj = pose_j.transform(pts)
        bj = xj / np.linalg.norm(xj, axis=1, keepdims=True)
        pose, count = g.decompose_essential(E, bi, bj)
        assert count == len(pts)
        assert g.rotation_angle(pose.R @ R.T) < 1e-8
        assert np.linalg.norm(np.cross(pose.t, t)) < 1e-8

    def test_forward_motion_cheirality(self):
        # pure forward motion: brute-force check that the winning candidate
        # beats every alternative of the four-fold ambiguity
        rng = np.random.default_rng(10)
        R = np.eye(3)
        t = np.array([0.0, 0.0, 1.0])
        pts = rng.normal(size=(60, 3)) * [1.5, 1.5, 0.5] + [0, 0, 6.0]
        bi = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        xj = pts @ R.T + t
        bj = xj / np.linalg.norm(xj, axis=1, keepdims=True)
        E = g.skew(t) @ R
        pose, count = g.decompose_essential(E, bi, bj)
        assert g.rotation_angle(pose.R @ R.T) < 1e-8
        assert np.linalg.norm(np.cross(pose.t, t)) < 1e-8
        # brute force: no other (R', t') candidate reaches this count
        u, s, vt = np.linalg.svd(E)
        if np.linalg.det(u) < 0:
            u = -u
        if np.linalg.det(vt) < 0:
            vt = -vt
        W = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
        counts = []
        for Rc in (u @ W @ vt, u @ W.T @ vt):
            for tc in (u[:, 2], -u[:, 2]):
                counts.append(int(g._cheirality_mask(Rc, tc, bi, bj).sum()))
        assert count == max(counts)
        assert sorted(counts)[-2] < count

    def test_mirror_symmetric_ambiguous(self):
        # one point consistent with the true candidate, one with its twisted
        # pair (a pi rotation about the baseline, i.e. a reflection through
        # the baseline plane): the cheirality vote ties 1-1
        t = np.array([1.0, 0.0, 0.0])
        E = g.skew(t) @ np.eye(3)
        twist = np.diag([1.0, -1.0, -1.0])
        X1 = np.array([0.2, 0.5, 2.0])
        Y1 = X1 + t
        X2 = np.array([-0.3, 0.4, 1.5])
        Y2 = twist @ X2 + t
        bi = np.stack([X1 / np.linalg.norm(X1), X2 / np.linalg.norm(X2)])
        bj = np.stack([Y1 / np.linalg.norm(Y1), Y2 / np.linalg.norm(Y2)])
        with pytest.raises(g.AmbiguousDecomposition):
            g.decompose_essential(E, bi, bj)

    def test_non_essential_rejected(self):
        bad = np.diag([1.0, 0.5, 0.0])
        with pytest.raises(ValueError):
            g.decompose_essential(bad, np.zeros((1, 3)), np.zeros((1, 3)))


class TestPose:
    def test_compose_inverse_identity(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            p = g.ViewPose(g.quat_exp(rng.normal(size=3)), rng.normal(size=3))
            ident = p.compose(p.inverse())
            assert abs(abs(ident.q[0]) - 1.0) < 1e-12
            assert np.linalg.norm(ident.t) < 1e-12

    def test_quaternion_normalized(self):
        p = g.ViewPose(np.array([2.0, 0.0, 0.0, 0.0]), np.zeros(3))
        assert abs(np.linalg.norm(p.q) - 1.0) < 1e-12

    def test_center_round_trip(self):
        rng = np.random.default_rng(13)
        c = rng.normal(size=3)
        p = g.ViewPose(g.quat_exp(rng.normal(size=3)), np.zeros(3))
        p = g.ViewPose(p.q, -(p.R @ c))
        assert np.allclose(p.center(), c, atol=1e-12)

    def test_matrix_quaternion_round_trip(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            q = g.quat_normalize(rng.normal(size=4))
            R = g.quat_to_matrix(q)
            q2 = g.matrix_to_quat(R)
            assert min(np.linalg.norm(q - q2), np.linalg.norm(q + q2)) < 1e-12


class TestCameraModel:
    def test_invariants(self):
        with pytest.raises(ValueError):
            g.CameraModel(g.CameraKind.PINHOLE_RADIAL, -5.0, 0, 0, (0, 0), 10, 10)
        with pytest.raises(ValueError):
            g.CameraModel(g.CameraKind.PINHOLE_RADIAL, 5.0, 100, 0, (0, 0), 10, 10)
        with pytest.raises(ValueError):
            g.CameraModel(g.CameraKind.FISHEYE_FULL, 5.0, 0, 0, (0, 0), 10, 10)

    def test_fisheye_escalation(self):
        cam = g.CameraModel(g.CameraKind.FISHEYE_RADIAL, 80.0, 1.0, 2.0, (0.1, 0.01), 100, 100)
        full = cam.to_fisheye_full()
        assert full.kind is g.CameraKind.FISHEYE_FULL
        assert full.k == (0.1, 0.01, 0.0, 0.0)
        with pytest.raises(ValueError):
            full.to_fisheye_full()
