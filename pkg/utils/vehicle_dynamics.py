"""
Kinematic bicycle model with first-order steering actuation.

State layout is (x, y, theta, kappa, kappa_des); the input is the desired
curvature rate u. Speed and input are held constant over each integration
step. Headings are never wrapped inside the integrator; callers normalize at
their own boundaries (VehicleState.from_array does it by default).
"""
import numpy as np

from models import ControlInput, ModelParams, STATE_DIM, VehicleState

X, Y, THETA, KAPPA, KAPPA_DES = range(STATE_DIM)


def _state_array(state):
    if isinstance(state, VehicleState):
        return state.as_array()
    return np.asarray(state, dtype=float)


def _input_value(control):
    if isinstance(control, ControlInput):
        return control.u
    return float(control)


def batch_derivative(states, inputs, speeds, tau, actuation_lag=True):
    """Vector field evaluated row-wise for an (M, 5) block of states.

    Without actuation lag the curvature equals the commanded curvature at all times.
    """
    theta = states[:, THETA]
    derivative = np.empty_like(states)
    derivative[:, X] = speeds * np.cos(theta)
    derivative[:, Y] = speeds * np.sin(theta)
    if actuation_lag:
        derivative[:, THETA] = speeds * states[:, KAPPA]
        derivative[:, KAPPA] = (states[:, KAPPA_DES] - states[:, KAPPA]) / tau
    else:
        derivative[:, THETA] = speeds * states[:, KAPPA_DES]
        derivative[:, KAPPA] = inputs
    derivative[:, KAPPA_DES] = inputs
    return derivative


def batch_state_jacobian(states, speeds, tau):
    """Continuous-time Jacobian df/dx for each row, shape (M, 5, 5)."""
    theta = states[:, THETA]
    jacobian = np.zeros((len(states), STATE_DIM, STATE_DIM))
    jacobian[:, X, THETA] = -speeds * np.sin(theta)
    jacobian[:, Y, THETA] = speeds * np.cos(theta)
    jacobian[:, THETA, KAPPA] = speeds
    jacobian[:, KAPPA, KAPPA] = -1.0 / tau
    jacobian[:, KAPPA, KAPPA_DES] = 1.0 / tau
    return jacobian


def batch_rk4(states, inputs, speeds, params: ModelParams, dt, actuation_lag=True):
    """Classical RK4 over a block of independent (state, input, speed) rows."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.broadcast_to(np.asarray(inputs, dtype=float), (len(states),))
    speeds = np.broadcast_to(np.asarray(speeds, dtype=float), (len(states),))
    tau = params.tau
    half = 0.5 * dt
    k1 = batch_derivative(states, inputs, speeds, tau, actuation_lag)
    k2 = batch_derivative(states + half * k1, inputs, speeds, tau, actuation_lag)
    k3 = batch_derivative(states + half * k2, inputs, speeds, tau, actuation_lag)
    k4 = batch_derivative(states + dt * k3, inputs, speeds, tau, actuation_lag)
    return states + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def batch_rk4_with_jacobians(states, inputs, speeds, params: ModelParams, dt):
    """RK4 step plus its exact sensitivities, differentiated through all four stages.

    Returns (next_states (M, 5), d_next/d_state (M, 5, 5), d_next/d_input (M, 5)).
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    count = len(states)
    inputs = np.broadcast_to(np.asarray(inputs, dtype=float), (count,))
    speeds = np.broadcast_to(np.asarray(speeds, dtype=float), (count,))
    tau = params.tau
    half = 0.5 * dt
    identity = np.broadcast_to(np.eye(STATE_DIM), (count, STATE_DIM, STATE_DIM))
    input_direction = np.zeros((count, STATE_DIM))
    input_direction[:, KAPPA_DES] = 1.0

    def stage(scale, previous):
        # previous = (k, dk/dx, dk/du) of the preceding stage, None for the first
        if previous is None:
            a_matrix = batch_state_jacobian(states, speeds, tau)
            return batch_derivative(states, inputs, speeds, tau), a_matrix, input_direction
        k_prev, dx_prev, du_prev = previous
        argument = states + scale * k_prev
        a_matrix = batch_state_jacobian(argument, speeds, tau)
        dx = a_matrix @ (identity + scale * dx_prev)
        du = np.einsum('mij,mj->mi', a_matrix, scale * du_prev) + input_direction
        return batch_derivative(argument, inputs, speeds, tau), dx, du

    k1, s1x, s1u = stage(0.0, None)
    k2, s2x, s2u = stage(half, (k1, s1x, s1u))
    k3, s3x, s3u = stage(half, (k2, s2x, s2u))
    k4, s4x, s4u = stage(dt, (k3, s3x, s3u))

    next_states = states + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    jac_state = identity + dt / 6.0 * (s1x + 2.0 * s2x + 2.0 * s3x + s4x)
    jac_input = dt / 6.0 * (s1u + 2.0 * s2u + 2.0 * s3u + s4u)
    return next_states, jac_state, jac_input


def continuous_derivative(state, control, speed, params: ModelParams):
    """Time derivative (v cos theta, v sin theta, v kappa, (kappa_des - kappa)/tau, u)."""
    values = _state_array(state)[None, :]
    derivative = batch_derivative(values, np.array([_input_value(control)]), np.array([float(speed)]),
                                  params.tau)
    return derivative[0]


def rk4_step(state, control, speed, params: ModelParams, dt, normalize: bool = True) -> VehicleState:
    next_state = batch_rk4(_state_array(state)[None, :], _input_value(control), float(speed), params, dt)[0]
    return VehicleState.from_array(next_state, normalize=normalize)


def rk4_step_with_jacobians(state, control, speed, params: ModelParams, dt, normalize: bool = True):
    """One RK4 step returning (next VehicleState, 5x5 state Jacobian, 5x1 input Jacobian)."""
    next_states, jac_state, jac_input = batch_rk4_with_jacobians(
        _state_array(state)[None, :], _input_value(control), float(speed), params, dt)
    return (VehicleState.from_array(next_states[0], normalize=normalize),
            jac_state[0], jac_input[0].reshape(STATE_DIM, 1))


def rollout(initial_state, inputs, speeds, params: ModelParams, dt):
    """Forward simulation from initial_state; returns the (N+1, 5) trajectory without angle wrapping."""
    inputs = np.asarray(inputs, dtype=float)
    trajectory = np.empty((len(inputs) + 1, STATE_DIM))
    trajectory[0] = _state_array(initial_state)
    for k, control in enumerate(inputs):
        trajectory[k + 1] = batch_rk4(trajectory[k][None, :], control, speeds[k], params, dt)[0]
    return trajectory


def steering_angle(kappa, params: ModelParams):
    """Front-wheel angle delta = arctan(kappa * b)."""
    angle = np.arctan(np.asarray(kappa, dtype=float) * params.wheelbase_b)
    return angle if np.ndim(angle) else float(angle)


def plant_step(state: VehicleState, control, speed, params: ModelParams, dt,
               actuation_lag: bool = True) -> VehicleState:
    """Simulated vehicle step; with the lag switched off curvature tracks kappa_des exactly."""
    values = _state_array(state)
    if not actuation_lag:
        values = values.copy()
        values[KAPPA] = values[KAPPA_DES]
    next_state = batch_rk4(values[None, :], _input_value(control), float(speed), params, dt, actuation_lag)[0]
    return VehicleState.from_array(next_state)
